import argparse
import logging
import sys

from commands import compete, evaluate, experiment, selftest, simulate, train
from utils.errors import LatentDemandError

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

COMMANDS = (simulate, train, evaluate, compete, experiment, selftest)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-demand",
        description="Simulate censored EV charging demand and train censoring-aware forecasters.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    logging.info("Starting %s", args.command)
    try:
        code = args.handler(args)
    except LatentDemandError as e:
        logging.error("%s failed: %s", args.command, e)
        return e.exit_code
    logging.info("Finished %s", args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
