"""Isotropic material laws and manufactured clamped solutions on the unit square.

Tensors are full ``(..., 2, 2)`` arrays here; the sign convention is
``div sigma = f`` throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

PI = np.pi


@dataclass(frozen=True)
class LameParams:
    mu: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")


def trace(t: np.ndarray) -> np.ndarray:
    return t[..., 0, 0] + t[..., 1, 1]


def deviatoric(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t - 0.5 * trace(t)[..., None, None] * np.eye(2)


def compliance_apply(t: np.ndarray, params: LameParams) -> np.ndarray:
    """``A t`` in the split form ``dev(t) / (2 mu) + tr(t) Id / (4 (lam + mu))``.

    The split avoids the cancellation of the textbook formula at large lambda.
    """
    t = np.asarray(t, dtype=float)
    tr = trace(t)[..., None, None]
    return deviatoric(t) / (2.0 * params.mu) + tr * np.eye(2) / (4.0 * (params.lam + params.mu))


def elasticity_apply(e: np.ndarray, params: LameParams) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    return params.lam * trace(e)[..., None, None] * np.eye(2) + 2.0 * params.mu * e


def compliance_inner(s: np.ndarray, t: np.ndarray, params: LameParams) -> np.ndarray:
    """Pointwise ``A s : t``."""
    sd, td = deviatoric(s), deviatoric(t)
    return (np.einsum("...ij,...ij->...", sd, td) / (2.0 * params.mu)
            + trace(s) * trace(t) / (4.0 * (params.lam + params.mu)))


@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form fields of a clamped exact solution.

    Every evaluator takes points of shape (..., 2); vector fields return
    (..., 2) and tensor fields (..., 2, 2).
    """

    name: str
    u: Callable[[np.ndarray], np.ndarray]
    grad_u: Callable[[np.ndarray], np.ndarray]   # g[..., i, j] = d_j u_i
    load: Callable[[np.ndarray, LameParams], np.ndarray]
    lambda_dependent_load: bool
    load_in_h1: bool = True

    def eps(self, x):
        g = self.grad_u(x)
        return 0.5 * (g + np.swapaxes(g, -1, -2))

    def sigma(self, x, params: LameParams):
        return elasticity_apply(self.eps(x), params)

    def div_sigma(self, x, params: LameParams):
        return self.load(x, params)

    def f(self, x, params: LameParams):
        return self.load(x, params)


def _trig_generic() -> ManufacturedCase:
    def parts(x):
        sx, sy = np.sin(PI * x[..., 0]), np.sin(PI * x[..., 1])
        cx, cy = np.cos(PI * x[..., 0]), np.cos(PI * x[..., 1])
        return sx, sy, cx, cy

    def u(x):
        sx, sy, _, _ = parts(x)
        s = sx * sy
        return np.stack([s, s], -1)

    def grad_u(x):
        sx, sy, cx, cy = parts(x)
        row = np.stack([PI * cx * sy, PI * sx * cy], -1)
        return np.stack([row, row], -2)

    def load(x, p: LameParams):
        sx, sy, cx, cy = parts(x)
        s_xx = -PI**2 * sx * sy
        s_yy = s_xx
        s_xy = PI**2 * cx * cy
        lam, mu = p.lam, p.mu
        f1 = lam * (s_xx + s_xy) + 2 * mu * s_xx + mu * (s_xy + s_yy)
        f2 = mu * (s_xy + s_xx) + lam * (s_xy + s_yy) + 2 * mu * s_yy
        return np.stack([f1, f2], -1)

    return ManufacturedCase("trig_generic", u, grad_u, load, True)


def _divfree_locking() -> ManufacturedCase:
    # u = (d_y phi, -d_x phi) with phi = (sin(pi x) sin(pi y))^2
    def u(x):
        X, Y = x[..., 0], x[..., 1]
        u1 = PI * np.sin(PI * X) ** 2 * np.sin(2 * PI * Y)
        u2 = -PI * np.sin(2 * PI * X) * np.sin(PI * Y) ** 2
        return np.stack([u1, u2], -1)

    def grad_u(x):
        X, Y = x[..., 0], x[..., 1]
        s2 = np.sin(2 * PI * X) * np.sin(2 * PI * Y)
        a = PI**2 * s2
        b = 2 * PI**2 * np.sin(PI * X) ** 2 * np.cos(2 * PI * Y)
        c = -2 * PI**2 * np.cos(2 * PI * X) * np.sin(PI * Y) ** 2
        return np.stack([np.stack([a, b], -1), np.stack([c, -a], -1)], -2)

    def load(x, p: LameParams):
        X, Y = x[..., 0], x[..., 1]
        lap1 = 2 * PI**3 * np.sin(2 * PI * Y) * (2 * np.cos(2 * PI * X) - 1)
        lap2 = -2 * PI**3 * np.sin(2 * PI * X) * (2 * np.cos(2 * PI * Y) - 1)
        return p.mu * np.stack([lap1, lap2], -1)

    return ManufacturedCase("divfree_locking", u, grad_u, load, False)


_CASES = {"trig_generic": _trig_generic, "divfree_locking": _divfree_locking}
CASE_NAMES = tuple(_CASES)


def manufactured_case(name: str) -> ManufacturedCase:
    key = name.replace("-", "_")
    if key not in _CASES:
        raise ValueError(f"unknown manufactured case {name!r}; choose from {', '.join(CASE_NAMES)}")
    return _CASES[key]()


def zero_load(x, params: LameParams | None = None) -> np.ndarray:
    return np.zeros(np.shape(x)[:-1] + (2,))
