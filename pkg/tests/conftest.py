import sys
from pathlib import Path

import numpy as np
import pytest

from kvfuse.core import CacheDims, PagedKvCache

sys.path.insert(0, str(Path(__file__).parent))  # make oracle.py importable

# One line per acceptance criterion, filled by tests/test_acceptance.py and
# echoed after the run (pytest captures stdout during the tests themselves).
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_dims() -> CacheDims:
    return CacheDims(B=2, p=2, t=2, h=2, d=4, L=2)


@pytest.fixture
def random_cache(small_dims) -> PagedKvCache:
    rng = np.random.default_rng(123)
    return PagedKvCache(
        dims=small_dims,
        keys=rng.standard_normal(small_dims.shape),
        values=rng.standard_normal(small_dims.shape),
    )


def make_random_cache(dims: CacheDims, seed: int) -> PagedKvCache:
    rng = np.random.default_rng(seed)
    return PagedKvCache(
        dims=dims,
        keys=rng.standard_normal(dims.shape),
        values=rng.standard_normal(dims.shape),
    )
