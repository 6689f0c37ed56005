import numpy as np
import pytest

from unsup_dereverb.data import build_dataset

# acceptance criteria register "[PASS]/[FAIL] ..." lines here; printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 training / 2 test utterances of 1.5 s, for smoke and determinism runs."""
    out = tmp_path_factory.mktemp("small_data")
    return build_dataset(out, {"train": 20, "val": 0, "test": 2}, seed=3, dur_s=1.5)
