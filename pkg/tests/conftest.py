import sys

import numpy as np
import pytest

from fpo.datagen import make_synthetic_task
from fpo.losses import KSampleBatch, PairwiseBatch
from fpo.policy import TabularPolicy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_instance(rng):
    """4x8 policy/reference pair with pairwise and K-sample batches."""
    pol = TabularPolicy(rng.normal(size=(4, 8)), rng.integers(1, 12, size=(4, 8)))
    ref = TabularPolicy(rng.normal(size=(4, 8)), pol.lengths)
    pairs = [(x, a, b) for x in range(4) for a, b in [(0, 1), (2, 5), (7, 3)]]
    pb = PairwiseBatch.from_records(pairs, rewards=rng.uniform(-2, 2, size=(len(pairs), 2)))
    kb = KSampleBatch(
        np.arange(4),
        np.array([rng.permutation(8)[:4] for _ in range(4)]),
        rng.uniform(-2, 2, size=(4, 4)),
    )
    return pol, ref, pb, kb


@pytest.fixture
def task():
    return make_synthetic_task(7, 4, 8, beta_star=0.5, reward_scale=2.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
