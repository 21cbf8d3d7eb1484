import pytest

from taskvae.data import synth_dataset
from taskvae.models import TrainConfig

# Acceptance results collected by tests/test_acceptance.py, printed at session end.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_ds():
    return synth_dataset(6, 30, seed=0)


@pytest.fixture
def fast_cfg():
    return TrainConfig(epochs=1, batch_size=32)
