"""``lmim version``: package name and version."""

import argparse

from app.schemas.report import VersionInfo
from app.utils import get_project_field, get_version


def version_info() -> VersionInfo:
    return VersionInfo(name=get_project_field("name", "latent-mim-lab"), version=get_version())


def register(subparsers) -> None:
    parser = subparsers.add_parser("version", help="print the package version")
    parser.set_defaults(handler=cmd_version)


def cmd_version(args: argparse.Namespace) -> int:
    info = version_info()
    print(f"{info.name} {info.version}")
    return 0
