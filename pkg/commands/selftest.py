"""selftest: run the test suites with pytest."""

import logging
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
SUITES = ("utils", "commands")


def register(subparsers) -> None:
    parser = subparsers.add_parser("selftest", help="run the test suites")
    parser.add_argument("--slow", action="store_true", help="include the acceptance-scale scenarios marked slow")
    parser.add_argument("pytest_args", nargs="*", help="extra arguments passed to pytest")
    parser.set_defaults(handler=run)


def run(args) -> int:
    import pytest  # dev dependency, only needed here

    argv = [str(ROOT / suite) for suite in SUITES]
    # an empty marker expression lifts the default "not slow" filter
    argv += ["-m", "" if args.slow else "not slow"]
    argv += list(args.pytest_args)
    logging.info("selftest: pytest %s", " ".join(argv))
    code = int(pytest.main(argv))
    if code != 0:
        logging.error("selftest: pytest exited with %s", code)
    return code
