"""``lmim pretrain``: train a preset or a config file."""

import argparse
from pathlib import Path

from app.errors import ConfigurationError
from app.services.presets import preset_names
from app.services.trainer import run_experiment


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "pretrain",
        help="pre-train a model",
        description="Resolve a preset or config file, apply overrides and train.",
    )
    parser.add_argument("config", nargs="?", type=Path, help="flat key = value config file")
    parser.add_argument("--preset", help=f"named preset ({', '.join(preset_names())})")
    parser.add_argument("--model", help="named model shape (vit-tiny-lab, vit-b16)")
    parser.add_argument(
        "--override", "-o", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key, repeatable",
    )
    parser.add_argument("--out", type=Path, help="run directory (default: RUNS_DIR/<name>)")
    parser.add_argument("--resume", type=Path, help="checkpoint to continue from")
    parser.set_defaults(handler=cmd_pretrain)


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Run one experiment and print where its artifacts went.

    Returns:
        int: 0 on success; errors propagate as ``LatentMIMError``.
    """
    if args.config is not None and args.preset is not None:
        raise ConfigurationError("give either a config file or --preset, not both", key="preset")
    result = run_experiment(args.preset, args.override, args.out, args.config, args.model, args.resume)
    print(f"run={result.out_dir}")
    print(f"steps={result.state.step}")
    print(f"checkpoint={result.checkpoint}")
    print(f"metrics={result.metrics}")
    if result.state.history:
        last = result.state.history[-1]
        print(f"loss={last.loss:.6f}")
        print(f"pooled_pair_cos={'none' if last.pooled_pair_cos is None else f'{last.pooled_pair_cos:.6f}'}")
    return 0
