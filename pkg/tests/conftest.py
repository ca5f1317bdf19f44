import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Acceptance:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __init__(self):
        self.lines: dict[str, str] = {}

    def record(self, key: str, ok: bool, detail: str):
        self.lines[key] = f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {detail}"
        print(self.lines[key])


_ACCEPTANCE = _Acceptance()


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE.lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE.lines, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_ACCEPTANCE.lines[key])
