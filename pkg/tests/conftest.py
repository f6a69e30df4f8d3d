import numpy as np
import pytest

_CRITERIA: dict = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    """Record one acceptance line: report(number, passed, detail). A ``tag``
    marks an extra check filed under the same criterion number."""
    def _report(n: int, passed: bool, detail: str, tag: str = "") -> None:
        label = f"{n}{tag}"
        line = f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[(n, tag)] = line
        print(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
