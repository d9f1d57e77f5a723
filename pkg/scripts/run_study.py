"""Convergence studies for every scheme and manufactured case, one CSV each.

    python scripts/run_study.py --out results/ --levels 4
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from hrfem.schemes import SCHEMES
from hrfem.verify import convergence_study

log = logging.getLogger("run_study")


@dataclass
class StudyConfig:
    out: Path = Path("results")
    levels: int = 4
    base: str = "crisscross:4"
    lambdas: tuple[float, ...] = (1.0, 1e2, 1e4, 1e6)
    schemes: tuple[str, ...] = SCHEMES
    cases: tuple[str, ...] = ("divfree_locking", "trig_generic")
    norms: tuple[str, ...] = ("u", "sigma", "div", "energy")


def run(cfg: StudyConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    for scheme in cfg.schemes:
        for case in cfg.cases:
            start = time.perf_counter()
            table = convergence_study(scheme, case, cfg.levels, cfg.lambdas, base=cfg.base)
            path = cfg.out / f"study_{scheme}_{case}.csv"
            table.to_csv(path)
            summary = []
            for norm in cfg.norms:
                rates = [table.finest_rate(norm, lam) for lam in cfg.lambdas]
                if all(r is not None for r in rates):
                    summary.append(f"{norm}: rates {min(rates):.3f}..{max(rates):.3f}, "
                                   f"robustness {table.robustness(norm):.3g}")
            log.info("%s/%s in %.1fs -> %s", scheme, case, time.perf_counter() - start, path)
            for line in summary:
                log.info("    %s", line)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=StudyConfig.out)
    p.add_argument("--levels", type=int, default=StudyConfig.levels)
    p.add_argument("--base", default=StudyConfig.base)
    p.add_argument("--scheme", action="append", choices=SCHEMES, help="repeatable; default all")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = StudyConfig(out=args.out, levels=args.levels, base=args.base)
    if args.scheme:
        cfg.schemes = tuple(args.scheme)
    run(cfg)


if __name__ == "__main__":
    main()
