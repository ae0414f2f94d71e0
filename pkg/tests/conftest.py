import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        if hasattr(rep, "wasxfail"):
            status = "FAIL (expected, see ledger)" if rep.skipped else "XPASS"
        else:
            status = "PASS" if rep.outcome == "passed" else "FAIL" if rep.outcome == "failed" else rep.outcome.upper()
        _CRITERIA.append((marker.args[0], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        tr.write_line(f"[{status}] {name}" + (f" :: {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""

    def record(text: str):
        request.node.user_properties.append(("detail", text))

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
