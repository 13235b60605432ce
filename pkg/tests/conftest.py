import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# acceptance verdicts, echoed at the end of the run regardless of capture
CRITERIA: dict[int, str] = {}


def report(k: int, ok: bool, detail: str) -> bool:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[k] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
