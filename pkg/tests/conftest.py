import numpy as np
import pytest

from conv2multi.imaging import I_MAX, IntensityImage

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion check")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for name, args in getattr(report, "criterion", ()):
        _CRITERIA.append((args, report.outcome, report.duration))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = [("criterion", marker.args)]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (n, text), outcome, duration in sorted(_CRITERIA, key=lambda c: c[0][0]):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {n:>2}: {text} ({duration:.1f}s)")


def random_image(rng, shape, ceiling=I_MAX):
    return IntensityImage(rng.uniform(0.0, ceiling, size=shape), ceiling)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
