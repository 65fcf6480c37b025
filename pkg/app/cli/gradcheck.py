"""``lmim gradcheck``: finite-difference validation of every differentiable op and loss."""

import argparse
import logging
import time
from pathlib import Path

from app.services import runconfig
from app.services.gradcheck import CHECKS, run_suite

logger = logging.getLogger(__name__)

FAILED = 1


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "gradcheck",
        help="check analytic gradients against finite differences",
        description="Run the float64 finite-difference suite; exits non-zero on any violation.",
    )
    parser.add_argument("--config", type=Path, help="config file whose loss.* settings the loss checks use")
    parser.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (elementwise ops use min(tol, 1e-6))")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--check", action="append", choices=sorted(CHECKS), help="run only this check, repeatable")
    parser.set_defaults(handler=cmd_gradcheck)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    loss_cfg = runconfig.load(args.config).loss if args.config is not None else None
    started = time.perf_counter()
    results = run_suite(tolerance=args.tolerance, seed=args.seed, loss_cfg=loss_cfg, names=args.check)
    for result in results:
        print(result.line())
    failures = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    worst_abs = max(r.max_abs_err for r in results)
    print(f"checks={len(results)} failed={len(failures)} max_rel_err={worst:.3e} max_abs_err={worst_abs:.3e}")
    logger.info("gradient suite finished in %.1fs", time.perf_counter() - started)
    if failures:
        logger.error("gradient check failed: %s", ", ".join(failures))
        return FAILED
    return 0
