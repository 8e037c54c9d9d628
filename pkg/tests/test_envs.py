import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcpo import oracle
from mcpo.envs import CartPole, KeyDoor, Pendulum, chain_mdp, make_env
from mcpo.errors import ConfigError, InputError, UsageError

ENV_IDS = ["pendulum", "cartpole", "keydoor", "chain:5"]


def random_action(env, rng):
    if env.spec.discrete:
        return int(rng.integers(env.spec.n_actions))
    return rng.uniform(-3, 3, size=env.spec.action_dim)


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_reset_is_deterministic_per_seed(env_id):
    a, b = make_env(env_id), make_env(env_id)
    np.testing.assert_array_equal(a.reset(123), b.reset(123))
    assert a.t == 0


def test_pendulum_observation_is_on_unit_circle():
    env = Pendulum()
    for seed in range(20):
        o = env.reset(seed)
        assert abs(o[0] ** 2 + o[1] ** 2 - 1.0) < 1e-9


def test_keydoor_reset_state():
    env = KeyDoor()
    o = env.reset(0)
    assert env.pos == env.start and not env.has_key and not env.door_open
    assert o.shape == (env.spec.obs_dim,) and o.sum() == 2.0 and o[-1] == 0.0


def test_pendulum_upright_rest_is_equilibrium():
    env = Pendulum()
    env.reset(0)
    env.angle, env.speed = 0.0, 0.0
    _, r, done = env.step(np.array([0.0]))
    assert r == pytest.approx(0.0, abs=1e-12) and not done
    assert abs(env.angle) < 1e-12


def test_pendulum_reward_formula_and_clipping():
    env = Pendulum()
    env.reset(0)
    env.angle, env.speed = 3.0 * math.pi / 2, 1.0  # wraps to -pi/2
    _, r, _ = env.step(np.array([5.0]))           # clipped to 2
    assert r == pytest.approx(-((math.pi / 2) ** 2 + 0.1 * 1.0 + 0.001 * 4.0), abs=1e-12)


def test_pendulum_truncates_at_time_limit():
    env = Pendulum()
    env.reset(0)
    for t in range(200):
        _, _, done = env.step(np.array([0.0]))
        assert done == (t == 199)
    assert env.truncated
    with pytest.raises(UsageError):
        env.step(np.array([0.0]))


def test_keydoor_scripted_optimal_path():
    env = KeyDoor()
    env.reset(0)
    total, done = 0.0, False
    for k, a in enumerate(KeyDoor.optimal_actions()):
        assert not done
        _, r, done = env.step(a)
        total += r
    assert done and total == 1.0 and not env.truncated
    assert env.t == 12


def test_keydoor_door_blocks_without_key():
    env = KeyDoor()
    env.reset(0)
    for a in [1, 1, 1, 0, 0, 0]:  # along the bottom row to (5,3), then up to (2,3)
        env.step(a)
    assert env.pos == (2, 3)
    env.step(1)
    assert env.pos == (2, 3) and not env.door_open


def test_keydoor_invalid_action():
    env = KeyDoor()
    env.reset(0)
    with pytest.raises(InputError):
        env.step(4)


def test_cartpole_failure_ends_episode_with_step_count_reward():
    env = CartPole()
    env.reset(0)
    total, done = 0.0, False
    while not done:
        _, r, done = env.step(1)  # constant push topples the pole
        total += r
    assert not env.truncated
    assert abs(env.state[2]) > env.theta_threshold or abs(env.state[0]) > env.x_threshold
    assert total == env.t


@pytest.mark.parametrize("env_id", ENV_IDS)
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**63 - 1))
def test_episode_length_bound_and_finite_obs(env_id, seed):
    env = make_env(env_id)
    rng = np.random.default_rng(seed % 2**32)
    o = env.reset(seed)
    done, n, rewards = False, 0, []
    while not done:
        o, r, done = env.step(random_action(env, rng))
        n += 1
        rewards.append(r)
        assert o.shape == (env.spec.obs_dim,) and np.all(np.isfinite(o))
    assert n <= env.spec.max_episode_len
    if env_id == "keydoor":
        assert set(rewards) <= {0.0, 1.0} and sum(rewards) <= 1.0


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_replay_from_seed_and_actions(env_id):
    rng = np.random.default_rng(5)
    a, b = make_env(env_id), make_env(env_id)
    a.reset(9)
    b.reset(9)
    done = False
    while not done:
        act = random_action(a, rng)
        oa, ra, done = a.step(act)
        ob, rb, _ = b.step(act)
        assert np.array_equal(oa, ob) and ra == rb


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_state_snapshot_restores_trajectory(env_id):
    rng = np.random.default_rng(1)
    env = make_env(env_id)
    env.reset(3)
    for _ in range(5):
        env.step(random_action(env, rng))
    snap = env.get_state()
    acts = [random_action(env, rng) for _ in range(10)]
    first = [env.step(a) for a in acts]
    other = make_env(env_id)
    other.set_state(snap)
    second = [other.step(a) for a in acts]
    for (o1, r1, d1), (o2, r2, d2) in zip(first, second):
        assert np.array_equal(o1, o2) and r1 == r2 and d1 == d2


def test_unknown_env_id():
    with pytest.raises(ConfigError):
        make_env("mujoco")
    with pytest.raises(ConfigError):
        make_env("chain:x")


# --- pendulum energy under zero torque --------------------------------------------------

def _energy_trace(steps, dt=0.05, seed=0):
    env = Pendulum(dt=dt, max_episode_len=10**9)
    env.reset(seed)
    e = [env.energy()]
    for _ in range(steps):
        env.step(np.array([0.0]))
        e.append(env.energy())
    return np.array(e)


def test_pendulum_energy_has_no_secular_drift():
    # semi-implicit Euler is symplectic: the energy error oscillates but stays bounded
    for seed in range(5):
        e = _energy_trace(20_000, seed=seed)
        err = np.abs(e - e[0])
        assert err[10_000:].max() <= 1.05 * err[:10_000].max()
        assert abs(e[-2000:].mean() - e[:2000].mean()) < 0.05


def test_pendulum_energy_local_error_is_second_order():
    def worst_step_change(dt):
        e = _energy_trace(int(round(10.0 / dt)), dt=dt, seed=1)
        return np.abs(np.diff(e)).max()
    coarse, fine = worst_step_change(0.05), worst_step_change(0.0125)
    assert 12.0 < coarse / fine < 20.0  # 4x smaller step -> ~16x smaller per-step change
    assert worst_step_change(0.05 / 64) < 1e-3


@pytest.mark.xfail(strict=True, reason="per-step energy change of semi-implicit Euler at h=0.05 "
                                       "reaches O(1) near the bottom of the swing; see decisions ledger")
def test_pendulum_energy_per_step_within_1e_3_at_h_0_05():
    for seed in range(5):
        assert np.abs(np.diff(_energy_trace(2000, seed=seed))).max() <= 1e-3


# --- tabular chain ----------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 7])
def test_chain_rows_are_distributions(n):
    m = chain_mdp(n, 0.9)
    np.testing.assert_allclose(m.transition.sum(-1), 1.0, atol=1e-12)
    assert m.initial_dist.sum() == pytest.approx(1.0, abs=1e-12)


def test_chain_rejects_bad_gamma():
    with pytest.raises(ConfigError):
        chain_mdp(3, 1.0)
    with pytest.raises(ConfigError):
        chain_mdp(1, 0.9)


def test_chain_always_right_without_slip_is_geometric():
    n, g = 5, 0.9
    m = chain_mdp(n, g, slip=0.0)
    right = np.tile([0.0, 1.0], (n, 1))
    # reward 1 per step from step n-1 onward: sum_{t>=n-1} g^t
    assert oracle.exact_return(m, right) == pytest.approx(g ** (n - 1) / (1 - g), abs=1e-12)


def test_chain_uniform_policy_matches_monte_carlo():
    m = chain_mdp(4, 0.8)
    pi = np.full((4, 2), 0.5)
    mean, se = oracle.mc_return(m, pi, 1_000_000, np.random.default_rng(0))
    assert abs(oracle.exact_return(m, pi) - mean) <= 3 * se
