"""Command-line interface: ``hrfem {mesh,verify,solve,study}``.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 solver failure.
Failures are reported on stderr as a single JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from .assembly import SolverError
from .elasticity import CASE_NAMES, LameParams, manufactured_case
from .mesh import MeshError, mesh_from_spec, refine_uniform, save_mesh
from .schemes import SCHEMES, Discretization, PostCheckError, run_scheme

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_SOLVER = 0, 1, 2, 3
CHECKS = ("adjoint", "dims", "icr", "poincare", "equivalence", "all")
CASES = tuple(c.replace("_", "-") for c in CASE_NAMES)

# acceptance tolerances shared with the test-suite
ADJOINT_TOL = 1e-10
EQUIV_STRESS_TOL = 1e-8
EQUIV_DIV_TOL = 1e-9
ICR_HALVING = (0.4, 0.6)
ICR_GROWTH = 1.2
POINCARE_GROWTH = 2.0


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    mesh: str = "crisscross:2"
    levels: int = 1
    lambdas: list[float] = field(default_factory=lambda: [1.0])
    mu: float = 1.0
    scheme: str = "hr"
    case: str = "trig-generic"
    check: str = "all"
    out: str | None = None
    seed: int = 42

    def validate(self) -> None:
        if self.levels < 1:
            raise UsageError("--levels must be a positive integer")
        if not self.lambdas or any(not np.isfinite(l) or l <= 0 for l in self.lambdas):
            raise UsageError("--lambda needs positive finite values")
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise UsageError("--mu must be positive")
        if self.command == "solve" and len(self.lambdas) != 1:
            raise UsageError("solve takes exactly one --lambda value")
        kind = self.mesh.partition(":")[0]
        if kind not in ("crisscross", "alternating", "file"):
            raise UsageError(f"unknown mesh kind {kind!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail(EXIT_USAGE, "usage", message)


def _fail(code: int, kind: str, message: str, **extra):
    print(json.dumps({"status": "error", "kind": kind, "message": message, **extra}), file=sys.stderr)
    raise SystemExit(code)


def _lambda_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid lambda list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hrfem", description="Robust low-degree mixed elasticity elements.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, mesh_default, levels_default, lam_default="1"):
        sp.add_argument("--mesh", default=mesh_default,
                        help="crisscross:N | alternating:N | file:PATH (default %(default)s)")
        sp.add_argument("--levels", type=int, default=levels_default,
                        help="number of mesh levels (default %(default)s)")
        sp.add_argument("--lambda", dest="lambdas", type=_lambda_list, default=_lambda_list(lam_default),
                        help="comma-separated Lame lambda values (default %(default)s)")
        sp.add_argument("--mu", type=float, default=1.0, help="Lame mu (default 1)")
        sp.add_argument("--out", default=None, help="output path")
        sp.add_argument("--seed", type=int, default=42, help="random seed (default 42)")

    m = sub.add_parser("mesh", help="write a mesh file")
    common(m, "crisscross:2", 1)
    v = sub.add_parser("verify", help="run structural and spectral checks")
    common(v, "crisscross:2", 3, "1,1e4")
    v.add_argument("--check", choices=CHECKS, default="all")
    s = sub.add_parser("solve", help="solve one problem and report errors")
    common(s, "crisscross:2", 1)
    s.add_argument("--scheme", choices=SCHEMES, default="hr")
    s.add_argument("--case", choices=CASES, default="trig-generic")
    st = sub.add_parser("study", help="convergence study written as CSV")
    common(st, "crisscross:4", 4, "1,1e2,1e4,1e6")
    st.add_argument("--scheme", choices=SCHEMES, default="hr")
    st.add_argument("--case", choices=CASES, default="divfree-locking")
    return p


def _config(ns) -> RunConfig:
    cfg = RunConfig(ns.command, ns.mesh, ns.levels, ns.lambdas, ns.mu,
                    getattr(ns, "scheme", "hr"), getattr(ns, "case", "trig-generic"),
                    getattr(ns, "check", "all"), ns.out, ns.seed)
    cfg.validate()
    return cfg


def _mesh_at(cfg: RunConfig):
    mesh = mesh_from_spec(cfg.mesh)
    for _ in range(cfg.levels - 1):
        mesh = refine_uniform(mesh)
    return mesh


# -- commands -------------------------------------------------------------------

def cmd_mesh(cfg: RunConfig) -> int:
    mesh = _mesh_at(cfg)
    if cfg.out is None:
        raise UsageError("mesh requires --out")
    save_mesh(mesh, cfg.out)
    print(json.dumps({"status": "ok", "nv": mesh.nv, "nt": mesh.nt, "ne": mesh.ne, "out": cfg.out}))
    return EXIT_OK


def run_checks(cfg: RunConfig) -> dict:
    from . import verify as V

    base = mesh_from_spec(cfg.mesh)
    selected = CHECKS[:-1] if cfg.check == "all" else (cfg.check,)
    report: dict = {"mesh": cfg.mesh, "seed": cfg.seed, "checks": {}}
    meshes = [base]
    for _ in range(cfg.levels - 1):
        meshes.append(refine_uniform(meshes[-1]))

    for name in selected:
        if name == "adjoint":
            vals = [V.check_adjoint_matrix(m) for m in meshes]
            report["checks"]["adjoint"] = {"max_residual": max(vals), "passed": max(vals) <= ADJOINT_TOL}
        elif name == "dims":
            reps = [V.check_structure(m) for m in meshes]
            report["checks"]["dims"] = {
                "levels": [r.dims for r in reps],
                "local_defect": max(r.details["local_kernel_range_defect"] for r in reps),
                "passed": all(r.passed for r in reps),
            }
        elif name == "icr":
            disc = [Discretization(m) for m in meshes]
            mplus = [V.compute_icr("div_on_sigma_mplus", d).icr for d in disc]
            ks = [V.compute_icr("div_on_sigma_ks", d).icr for d in disc]
            ineq = [V.icr_inequality(d) for d in disc]
            halving = [b / a for a, b in zip(mplus, mplus[1:])]
            growth = [b / a for a, b in zip(ks, ks[1:])]
            report["checks"]["icr"] = {
                "div_on_sigma_mplus": mplus, "ratios": halving,
                "div_on_sigma_ks": ks, "growth": growth,
                "inequality": [i["holds"] for i in ineq],
                "passed": (all(ICR_HALVING[0] <= r <= ICR_HALVING[1] for r in halving)
                           and all(g <= ICR_GROWTH for g in growth)
                           and all(i["holds"] for i in ineq)),
            }
        elif name == "poincare":
            reps = [V.check_tr_dev_poincare(m, seed=cfg.seed) for m in meshes]
            ratios = [r.worst_ratio for r in reps]
            sharp = [r.sharp_constant for r in reps]
            ok = all(r <= POINCARE_GROWTH * ratios[0] for r in ratios)
            if all(s is not None for s in sharp):
                ok = ok and all(s <= POINCARE_GROWTH * sharp[0] for s in sharp)
            report["checks"]["poincare"] = {"sampled": ratios, "sharp": sharp, "passed": ok}
        elif name == "equivalence":
            rows = []
            for lam in cfg.lambdas:
                for m in meshes[:2]:
                    r = V.check_equivalence(m, LameParams(cfg.mu, lam))
                    rows.append({"lambda": lam, "nt": m.nt, **r})
            ok = all(r["stress_mismatch"] <= EQUIV_STRESS_TOL and r["div_minus_fh"] <= EQUIV_DIV_TOL
                     for r in rows)
            report["checks"]["equivalence"] = {"runs": rows, "passed": ok}
    report["passed"] = all(c["passed"] for c in report["checks"].values())
    return report


def cmd_verify(cfg: RunConfig) -> int:
    report = run_checks(cfg)
    text = json.dumps(report, indent=2, default=float)
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if not report["passed"]:
        failed = [k for k, c in report["checks"].items() if not c["passed"]]
        _fail(EXIT_VERIFY, "verification", f"failed checks: {', '.join(failed)}", failed=failed)
    return EXIT_OK


def _warn_regularity(cfg: RunConfig) -> None:
    case = manufactured_case(cfg.case)
    if cfg.scheme in ("hr-min", "nl-min") and not case.load_in_h1:
        warnings.warn(f"{cfg.scheme} error bounds assume an H^1 load; case {cfg.case} does not provide one")


def cmd_solve(cfg: RunConfig) -> int:
    from .verify import error_norms

    _warn_regularity(cfg)
    mesh = _mesh_at(cfg)
    case = manufactured_case(cfg.case)
    params = LameParams(cfg.mu, cfg.lambdas[0])
    sol = run_scheme(cfg.scheme, mesh, params, case.f)
    err = error_norms(sol, case)
    summary = {
        "status": "ok", "scheme": cfg.scheme, "case": cfg.case, "mesh": cfg.mesh,
        "levels": cfg.levels, "nt": mesh.nt, "h": mesh.h, "ndof": sol.ndof,
        "lambda": params.lam, "mu": params.mu,
        "errors": {"u": err.u, "sigma": err.sigma, "div": err.div, "energy": err.energy},
        "checks": sol.checks,
    }
    if cfg.out:
        _dump_fields(sol, cfg.out)
        summary["out"] = cfg.out
    print(json.dumps(summary, default=float))
    return EXIT_OK


def _dump_fields(sol, path) -> None:
    """Centroid values of the discrete fields, one cell per line."""
    c = sol.mesh.centroids
    cells = np.arange(sol.mesh.nt)
    u = sol.eval_cells("u", cells, c)
    cols = ["cell", "x", "y", "u1", "u2"]
    data = [cells, c[:, 0], c[:, 1], u[:, 0], u[:, 1]]
    if sol.sigma is not None:
        s = sol.eval_cells("sigma", cells, c)
        cols += ["s11", "s12", "s22"]
        data += [s[:, 0, 0], s[:, 0, 1], s[:, 1, 1]]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*data):
            fh.write(",".join([str(int(row[0]))] + [f"{v:.12g}" for v in row[1:]]) + "\n")


def cmd_study(cfg: RunConfig) -> int:
    from .verify import StudyAborted, convergence_study

    _warn_regularity(cfg)
    try:
        table = convergence_study(cfg.scheme, cfg.case, cfg.levels, cfg.lambdas, cfg.mu, cfg.mesh, cfg.seed)
    except StudyAborted as exc:
        _emit(exc.table.to_csv(), cfg.out)
        cause = exc.__cause__
        code = EXIT_SOLVER if isinstance(cause, SolverError) else EXIT_VERIFY
        _fail(code, "solver" if code == EXIT_SOLVER else "verification", str(exc))
    _emit(table.to_csv(), cfg.out)
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


COMMANDS = {"mesh": cmd_mesh, "verify": cmd_verify, "solve": cmd_solve, "study": cmd_study}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        cfg = _config(ns)
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        _fail(EXIT_USAGE, "usage", str(exc))
    except (MeshError, ValueError, OSError) as exc:
        _fail(EXIT_USAGE, "input", str(exc))
    except SolverError as exc:
        _fail(EXIT_SOLVER, "solver", str(exc), residual=exc.residual)
    except PostCheckError as exc:
        _fail(EXIT_VERIFY, "verification", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
