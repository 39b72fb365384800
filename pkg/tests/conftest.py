import numpy as np
import pytest
import torch

from srkn.datasets import SequenceBatch, gen_four_modes
from srkn.model import SRKN, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(input_kind="real", obs_dim=2, m=3, k=4, gru_hidden=8,
                enc_hidden=(8,), dec_hidden=(8,), trans_hidden=(8,),
                inf_hidden=(8,), init_seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> SRKN:
    return SRKN(tiny_config())


@pytest.fixture
def small_batch() -> SequenceBatch:
    return gen_four_modes(24, seed=42)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def state_to_numpy(state):
    """FactoredGaussianState -> (mean, u, l, s) numpy copies."""
    return (state.mean.detach().numpy().copy(),
            state.cov_upper.detach().numpy().copy(),
            state.cov_lower.detach().numpy().copy(),
            state.cov_side.detach().numpy().copy())


def gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# Pass/fail lines recorded by the acceptance tests; echoed after the run so
# they stay visible even when pytest captures stdout.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
