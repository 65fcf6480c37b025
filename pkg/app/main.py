import sys
import logging
import argparse
from typing import List, Optional
from app.cli import evaluate, gradcheck, pretrain, synth, version
from app.config import settings
from app.errors import LatentMIMError
from app.utils import get_version

def handle_exception(exc_type, exc_value, exc_traceback):
    """
    Global exception handler.

    Args:
        exc_type (Type[BaseException]): The exception type.
        exc_value (BaseException): The exception instance.
        exc_traceback (TracebackType): The traceback object.

    This function logs uncaught exceptions and suppresses the stack trace for keyboard
    interrupts to allow graceful shutdowns.
    """
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    logging.critical("Uncaught exception", exc_info=(exc_type, exc_value, exc_traceback))

sys.excepthook = handle_exception

# Include subcommands
COMMANDS = (pretrain, evaluate, gradcheck, synth, version)

def build_parser() -> argparse.ArgumentParser:
    """Builds the ``lmim`` argument parser with one subcommand per ``app.cli`` module.

    Returns:
        argparse.ArgumentParser: The top-level parser.
    """
    parser = argparse.ArgumentParser(prog="lmim", description="Desk-scale latent masked image modeling lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_version()}")
    parser.add_argument("--log-level", help=f"override LMIM_LOG_LEVEL (current: {settings.LOG_LEVEL})")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser

def configure_logging(level: Optional[str] = None) -> None:
    """Configures root logging from the settings.

    Args:
        level: Optional level name taking precedence over the settings.
    """
    logging.basicConfig(
        level=level.upper() if level else settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )

def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the ``lmim`` console script.

    Args:
        argv: Arguments without the program name; ``sys.argv[1:]`` when omitted.

    Returns:
        int: Process exit code. 0 ok, 2 configuration, 3 training NaN,
        4 checkpoint mismatch, 5 I/O.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except LatentMIMError as e:
        key = getattr(e, "key", None)
        logging.error("%s%s", f"[{key}] " if key else "", e.detail)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code

if __name__ == "__main__":
    sys.exit(main())
