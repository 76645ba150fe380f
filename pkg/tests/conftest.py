import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ahmf", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ahmf")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = {
    1: "gradient suite",
    2: "metric oracle equivalence",
    3: "attention normalisation",
    4: "toy overfit",
    5: "memory ablation direction",
    6: "longer history helps",
    7: "bank update position",
    8: "inference freeze",
    9: "domain isolation",
    10: "schedule exactness",
    11: "format round-trips",
}
_verdicts = {}


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome; the terminal summary prints every line."""

    def record(number, passed, detail):
        _verdicts[number] = (bool(passed), detail)
        print(_line(number))
        return bool(passed)

    return record


def _line(number):
    if number not in _verdicts:
        return f"[----] {number:>2} {CRITERIA[number]}: not run (or errored before a verdict)"
    passed, detail = _verdicts[number]
    return f"[{'PASS' if passed else 'FAIL'}] {number:>2} {CRITERIA[number]}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        terminalreporter.write_line(_line(n))
