import numpy as np
import pytest

from stoplab.config import RunConfig

TINY = {
    "data.n_train": 64,
    "data.n_test": 32,
    "data.image_size": 16,
    "data.patch": 4,
    "model.enc_depth": 2,
    "model.d_e": 16,
    "model.enc_heads": 2,
    "model.pred_depth": 1,
    "model.d_p": 8,
    "model.pred_heads": 2,
    "model.mlp_ratio": 2.0,
    "optim.batch": 8,
    "train.steps": 12,
    "train.ckpt_every": 0,
    "eval.epochs": 40,
}


@pytest.fixture
def tiny_cfg():
    return RunConfig(dict(TINY))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
