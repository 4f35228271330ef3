import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedlab.data import gen_blobs  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_blobs():
    return gen_blobs(m=4, d=6, n_per_class=40, spread=0.1, seed=7)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number, name, ok, detail in sorted(RESULTS):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {name} -- {detail}")
