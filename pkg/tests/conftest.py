import numpy as np
import pytest

from smpo_lab.harness.config import TrainConfig
from smpo_lab.harness.data import gen_toy_data
from smpo_lab.harness.train import pretrain_reference
from smpo_lab.numerics import make_schedule
from smpo_lab.preference import RewardFunction, label_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sched():
    return make_schedule(20, "linear_beta", 0.002, 0.3)


@pytest.fixture(scope="session")
def toy():
    """Pretrained gmm2d reference shared by the slower statistical tests."""
    cfg = TrainConfig()
    ds = gen_toy_data("gmm2d", 5000, 0)
    ref = pretrain_reference(ds, cfg)
    labeled = label_dataset(ds, RewardFunction(), cfg.gamma)
    return {"cfg": cfg, "ds": ds, "labeled": labeled, "ref": ref,
            "sched": cfg.make_schedule()}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
