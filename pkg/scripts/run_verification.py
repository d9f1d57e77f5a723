"""Structural, spectral and equivalence checks over a refinement sequence, written as JSON."""
from __future__ import annotations

import argparse
import json
import sys

from hrfem.cli import RunConfig, run_checks


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--mesh", default="crisscross:2")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--lambda", dest="lambdas", default="1,1e4")
    p.add_argument("--out", default=None)
    args = p.parse_args()
    cfg = RunConfig("verify", mesh=args.mesh, levels=args.levels,
                    lambdas=[float(v) for v in args.lambdas.split(",")])
    cfg.validate()
    report = run_checks(cfg)
    text = json.dumps(report, indent=2, default=float)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    for name, check in report["checks"].items():
        print(f"{'PASS' if check['passed'] else 'FAIL'} {name}")
    return 0 if report["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
