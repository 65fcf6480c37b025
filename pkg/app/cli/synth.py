"""``lmim synth``: write a synthetic raster dataset."""

import argparse
from pathlib import Path

from app.config import settings
from app.services.synth import textured_shapes, two_textures, write_dataset


def register(subparsers) -> None:
    parser = subparsers.add_parser(
        "synth",
        help="generate a synthetic dataset",
        description="Write PPM images, PGM masks and index.csv; byte-reproducible per seed.",
    )
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--count", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=96, help="image side in pixels")
    parser.add_argument("--segmentation", action="store_true", help="two-texture images with region masks")
    parser.add_argument("--out", type=Path, help=f"output directory (default: {settings.DATA_DIR}/synthetic)")
    parser.set_defaults(handler=cmd_synth)


def cmd_synth(args: argparse.Namespace) -> int:
    if args.segmentation:
        data = two_textures(args.count, args.size, args.seed)
    else:
        data = textured_shapes(args.classes, args.count, args.size, args.seed)
    out = write_dataset(args.out or Path(settings.DATA_DIR) / "synthetic", data)
    print(f"out={out}")
    print(f"images={len(data.images)}")
    print(f"classes={len(set(int(label) for label in data.labels))}")
    return 0
