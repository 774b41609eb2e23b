import argparse
import importlib
import logging
import sys

from dotenv import load_dotenv

from utils.config import load_settings
from utils.errors import SynchronyError
from utils.manifest import TOOL_VERSION

# Load environment variables
load_dotenv()

EXTENSIONS = [
    "commands.grid",
    "commands.data",
    "commands.learn",
    "commands.runs",
]


def build_parser(settings):
    parser = argparse.ArgumentParser(
        prog="synchrony",
        description="Transient-stability lab: simulate grids, build datasets, train and query the classifier.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in EXTENSIONS:
        importlib.import_module(name).setup(subparsers, settings)
    return parser


def run(argv=None):
    """Parses ``argv``, runs the subcommand and returns its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        settings = load_settings()
    except SynchronyError as e:
        print(f"Error: {e}")
        return e.exit_code
    logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    args = build_parser(settings).parse_args(argv)
    args.argv = argv
    args.settings = settings
    args.runner = run
    try:
        return args.func(args)
    except SynchronyError as e:
        print(f"Error: {e}")
        return e.exit_code


if __name__ == "__main__":
    try:
        sys.exit(run())
    except KeyboardInterrupt:
        pass
