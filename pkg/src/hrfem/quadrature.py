"""Quadrature rules on triangles in barycentric form.

Degrees 1-5 use fully symmetric tabulated rules (Strang-Fix / Dunavant);
higher degrees use the collapsed Gauss-Jacobi product rule, which has
positive weights and is exact to any requested degree.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 12


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray   # (nq, 3) barycentric coordinates
    weights: np.ndarray  # (nq,), sum to 1
    degree: int

    def __len__(self) -> int:
        return len(self.weights)


def _orbit3(a: float) -> list[tuple[float, float, float]]:
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


def _orbit6(a: float, b: float) -> list[tuple[float, float, float]]:
    c = 1.0 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def _symmetric(orbits) -> tuple[np.ndarray, np.ndarray]:
    pts, wts = [], []
    for kind, w, *args in orbits:
        if kind == 1:
            p = [(1 / 3, 1 / 3, 1 / 3)]
        elif kind == 3:
            p = _orbit3(*args)
        else:
            p = _orbit6(*args)
        pts += p
        wts += [w] * len(p)
    return np.array(pts), np.array(wts)


_TABLE = {
    1: [(1, 1.0)],
    2: [(3, 1 / 3, 1 / 6)],
    3: [
        (6, 1 / 6, 0.659027622374092, 0.231933368553031),
    ],
    4: [
        (3, 0.223381589678011, 0.445948490915965),
        (3, 0.109951743655322, 0.091576213509771),
    ],
    5: [
        (1, 0.225),
        (3, 0.132394152788506, 0.470142064105115),
        (3, 0.125939180544827, 0.101286507323456),
    ],
}


def _collapsed(degree: int) -> tuple[np.ndarray, np.ndarray]:
    n = (degree + 2) // 2
    s, ws = roots_legendre(n)
    z, wz = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (s + 1.0)
    ws = 0.5 * ws
    t = 0.5 * (z + 1.0)
    wt = 0.25 * wz  # (1 - t) dt absorbed by the Jacobi weight
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    x = (S * (1.0 - T)).ravel()
    y = T.ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return pts, 2.0 * W.ravel()


@lru_cache(maxsize=None)
def quadrature(degree: int) -> QuadRule:
    """Rule exact for polynomials of total degree ``degree`` on a triangle."""
    if int(degree) != degree or not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree!r} (1..{MAX_DEGREE})")
    degree = int(degree)
    if degree in _TABLE:
        pts, wts = _symmetric(_TABLE[degree])
    else:
        pts, wts = _collapsed(degree)
    wts = wts / wts.sum()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadRule(pts, wts, degree)


def integrate_reference(f, degree: int) -> float:
    """Integral of ``f(x, y)`` over the reference triangle (0,0),(1,0),(0,1)."""
    q = quadrature(degree)
    x, y = q.points[:, 1], q.points[:, 2]
    return 0.5 * float(np.sum(q.weights * f(x, y)))
