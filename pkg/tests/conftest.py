import numpy as np
import pytest

from mcpo import nn
from mcpo.rollout import RolloutBatch


def make_batch(arch: nn.NetArch, old_params, obs, actions, advantage, value_target=None) -> RolloutBatch:
    """A minibatch whose sampling-policy fields are computed from ``old_params``."""
    obs = np.asarray(obs, dtype=np.float64)
    n = obs.shape[0]
    dist, value = nn.forward(old_params, arch, obs)
    actions = np.asarray(actions)
    return RolloutBatch(
        obs=obs, actions=actions, rewards=np.zeros(n), dones=np.zeros(n, bool),
        truncated=np.zeros(n, bool), final_values=np.zeros(n),
        logprob_old=np.asarray(nn.log_prob(dist, actions), dtype=np.float64),
        value_old=np.asarray(value, dtype=np.float64), bootstrap_value=np.zeros(1), n_actors=1, horizon=n,
        old_loc=np.asarray(dist.loc, dtype=np.float64),
        old_log_std=None if dist.log_std is None else np.asarray(dist.log_std, dtype=np.float64),
        advantage=np.asarray(advantage, dtype=np.float64),
        value_target=np.zeros(n) if value_target is None else np.asarray(value_target, dtype=np.float64))


def random_batch(rng: np.random.Generator, arch: nn.NetArch, old_params, n: int) -> RolloutBatch:
    obs = rng.normal(size=(n, arch.input_dim))
    if arch.policy_head == "categorical":
        actions = rng.integers(0, arch.action_dim, size=n)
    else:
        actions = rng.normal(size=(n, arch.action_dim))
    return make_batch(arch, old_params, obs, actions, rng.normal(size=n), rng.normal(size=n))


@pytest.fixture
def small_arch():
    return nn.NetArch(3, 2, ((6, "tanh"),), "categorical")


@pytest.fixture
def small_gaussian_arch():
    return nn.NetArch(3, 2, ((6, "tanh"),), "gaussian")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
