"""Emits one PASS/FAIL line per criterion-marked test on the real stdout.

pytest redirects the output file descriptors while a test body runs, so
the lines come from the report hook, which fires outside the captured
region. The leading newline closes the progress line the terminal
reporter leaves dangling.
"""

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(label): acceptance check reported as a PASS/FAIL line",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion_label = marker.args[0]


def pytest_runtest_logreport(report):
    label = getattr(report, "criterion_label", None)
    if label is None:
        return
    if report.when == "call":
        print(f"\n{'PASS' if report.passed else 'FAIL'}: {label}", flush=True)
    elif report.failed:
        # A broken fixture fails the criterion before its body runs.
        print(f"\nFAIL: {label}", flush=True)
