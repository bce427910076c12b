import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CRITERIA = {
    1: "gradient correctness",
    2: "divergence identities",
    3: "solver fidelity",
    4: "IWV calibration and DEV variance",
    5: "oracle dominance and baseline containment",
    6: "error scaling with domain gap",
    7: "end-to-end desk benchmark",
    8: "format round-trips and verify",
}
_outcomes: dict = {}
_details: dict = {}


def pytest_runtest_logreport(report):
    item_marks = getattr(report, "criterion", None)
    if item_marks is None:
        return
    ok = report.passed or (report.when != "call" and not report.failed)
    prev = _outcomes.get(item_marks, True)
    _outcomes[item_marks] = prev and ok and not report.skipped


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        extra = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n} [{CRITERIA[n]}]: {status}" + (f" ({extra})" if extra else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def detail():
    """Attach a measured value to an acceptance criterion's summary line."""
    def note(n, text):
        _details.setdefault(n, []).append(text)
    return note
