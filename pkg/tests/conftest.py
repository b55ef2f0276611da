import sys

import numpy as np
import pytest

from hgrl import tensor as T


@pytest.fixture
def f64():
    """64-bit oracle mode: new tensors default to float64 for the duration of a test."""
    with T.default_dtype(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, one line per criterion."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
