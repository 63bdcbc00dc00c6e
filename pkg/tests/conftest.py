import numpy as np
import pytest

from panoptikit.panio import small_class_config
from panoptikit.tensor import Tensor

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    """Collect outcomes of the acceptance checks for the summary block."""
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.failed):
        _acceptance_results.append((name, report.outcome))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance checks")
    for name, outcome in _acceptance_results:
        label = name.removeprefix("test_").replace("_", " ")
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status} {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_classes():
    return small_class_config(4, 3)


def rand_tensor(rng, n, c, h, w, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=(n, c, h, w)).astype(np.float32))
