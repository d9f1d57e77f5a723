"""Displacement error against lambda for the robust schemes on the divergence-free case.

Prints one row per lambda at a fixed mesh level, so locking would show up as a
growing column.
"""
from __future__ import annotations

import argparse

from hrfem.elasticity import LameParams, manufactured_case
from hrfem.mesh import mesh_from_spec, refine_uniform
from hrfem.schemes import SCHEMES, Discretization, run_scheme
from hrfem.verify import error_norms


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--mesh", default="crisscross:4")
    p.add_argument("--refine", type=int, default=2)
    args = p.parse_args()
    mesh = mesh_from_spec(args.mesh)
    for _ in range(args.refine):
        mesh = refine_uniform(mesh)
    disc = Discretization(mesh)
    case = manufactured_case("divfree_locking")
    print("lambda     " + "".join(f"{s:>12}" for s in SCHEMES))
    for lam in (1.0, 1e2, 1e4, 1e6, 1e8):
        errs = [error_norms(run_scheme(s, disc, LameParams(1.0, lam), case.f), case).u for s in SCHEMES]
        print(f"{lam:<11.0e}" + "".join(f"{e:12.4e}" for e in errs))


if __name__ == "__main__":
    main()
