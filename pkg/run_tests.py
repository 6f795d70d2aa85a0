import argparse
import os
import re
import sys
import unittest
from io import StringIO

from test_utils.decorators import SLOW_TESTS_ENV
from test_utils.json_test_runner import JSONTestRunner


def iter_cases(suite):
    for item in suite:
        if isinstance(item, unittest.TestSuite):
            yield from iter_cases(item)
        else:
            yield item


def filter_suite(suite, task: str) -> unittest.TestSuite:
    kept = unittest.TestSuite()
    for case in iter_cases(suite):
        if "FailedTest" in str(type(case)):
            kept.addTest(case)
            continue
        func = getattr(case, case._testMethodName)
        if task and not re.match(rf"^{re.escape(task)}(\.|$)", getattr(func, "__number__", "")):
            continue
        kept.addTest(case)
    return kept


if __name__ == "__main__":

    p = argparse.ArgumentParser()
    p.add_argument(
        "task",
        help=(
            "The task number you'd like to run. "
            "Leave blank for all tasks.\n\n"
            "Example: run_tests.py 3\n"
            "Runs the tests with @number('3.x')."
        ),
        default="",
        nargs="?",
    )
    p.add_argument(
        "-s",
        "--slow",
        help="Also run the long seeded experiment tests.",
        action="store_true",
    )
    p.add_argument(
        "-j",
        "--json",
        help="Print a JSON report instead of the text runner output.",
        action="store_true",
    )
    args = p.parse_args()
    if args.slow:
        # must be set before test modules are imported by discovery
        os.environ[SLOW_TESTS_ENV] = "1"

    suite = filter_suite(unittest.defaultTestLoader.discover("tests", top_level_dir="."), args.task)
    if args.json:
        f = StringIO("")
        runner = JSONTestRunner(stream=f)
        outcome = runner.run(suite)
        print(f.getvalue())
    else:
        outcome = unittest.TextTestRunner().run(suite)
    sys.exit(0 if outcome.wasSuccessful() else 1)
