"""Shared fixtures and the acceptance summary hook.

Thread pinning happens before numpy is touched so that BLAS reductions
stay deterministic regardless of machine size.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from modalrec import InteractionSet

# acceptance tests append "ACCEPTANCE n: PASS|FAIL" lines here; the
# terminal summary hook replays them after the test report
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(ACCEPTANCE_LINES)):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture
def tiny_interactions() -> InteractionSet:
    """Three users over four items with counted duplicates."""
    return InteractionSet(
        user_ids=["u0", "u1", "u2"],
        item_ids=["s0", "s1", "s2", "s3"],
        users=np.array([0, 0, 1, 1, 2, 2]),
        items=np.array([0, 1, 1, 2, 2, 3]),
        weights=np.array([2.0, 1.0, 1.0, 1.0, 1.0, 3.0]),
        timestamps=np.array([1.0, 2.0, np.nan, 4.0, 5.0, 6.0]),
    )
