import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poolbench.bench import synth_generate

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    table = item.config._criteria
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        state = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        prev = table.get(number, (title, "PASS"))[1]
        # a criterion passes only if every test attached to it passes
        if prev == "FAIL" or state == "FAIL":
            state = "FAIL"
        elif prev == "SKIP" and state == "PASS":
            state = "PASS"
        table[number] = (title, state)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = getattr(config, "_criteria", {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        title, state = table[number]
        terminalreporter.write_line(f"[{state}] criterion {number}: {title}")


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_generate(out, n_per_class=50, seed=7)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
