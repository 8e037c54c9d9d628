import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcpo import autodiff as ad
from mcpo import nn, oracle
from mcpo.errors import ConfigError, InputError, NumericalError

TINY = nn.NetArch(2, 2, ((1, "tanh"),), "categorical")
# h0.w (2x1), h0.b, pi.w (1x2), pi.b (2), v.w (1x1), v.b
TINY_PARAMS = np.array([0.5, -1.0, 0.1, 2.0, -1.0, 0.0, 0.5, 3.0, -0.2])


def cat(logits):
    return nn.DistParams("categorical", np.asarray(logits, float))


def gauss(mu, log_std):
    return nn.DistParams("diag-gaussian", np.asarray(mu, float), np.asarray(log_std, float))


# --- forward --------------------------------------------------------------------------

def test_zero_params_give_uniform_policy_and_zero_value():
    arch = nn.NetArch(3, 4)
    dist, value = nn.forward(np.zeros(arch.n_params), arch, np.array([0.3, -1.0, 2.0]))
    np.testing.assert_array_equal(dist.loc, np.zeros(4))
    assert value == 0.0
    np.testing.assert_allclose(nn.probs(dist), 0.25, atol=1e-15)


def test_tiny_net_matches_hand_computed_chain():
    # hand values: h = tanh(0.5*1 - 1*2 + 0.1), logits = [2h, -h + 0.5], V = 3h - 0.2
    dist, value = nn.forward(TINY_PARAMS, TINY, np.array([1.0, 2.0]))
    np.testing.assert_allclose(dist.loc, [-1.770703296404525, 1.3853516482022625], rtol=0, atol=1e-14)
    assert value == pytest.approx(-2.8560549446067878, abs=1e-14)


def test_forward_is_bit_deterministic():
    arch = nn.NetArch(3, 1, policy_head="gaussian")
    p = nn.init_params(arch, np.random.default_rng(0))
    s = np.array([0.1, 0.2, 0.3])
    a, b = nn.forward(p, arch, s), nn.forward(p + 0.0, arch, s)
    assert np.array_equal(a[0].loc, b[0].loc) and a[1] == b[1]


def test_batched_forward_matches_single_states():
    arch = nn.NetArch(3, 2)
    p = nn.init_params(arch, np.random.default_rng(1))
    states = np.random.default_rng(2).normal(size=(5, 3))
    dist, value = nn.forward(p, arch, states)
    for i in range(5):
        d1, v1 = nn.forward(p, arch, states[i])
        np.testing.assert_allclose(dist.loc[i], d1.loc, atol=1e-14)
        assert value[i] == pytest.approx(v1, abs=1e-14)


def test_forward_rejects_dimension_mismatch():
    with pytest.raises(ConfigError):
        nn.forward(TINY_PARAMS, TINY, np.zeros(3))
    with pytest.raises(ConfigError):
        nn.forward(TINY_PARAMS[:-1], TINY, np.zeros(2))


def test_param_layout_is_one_shared_vector():
    arch = nn.NetArch(3, 1, policy_head="gaussian")
    names = [n for n, _ in arch.layout()]
    assert names == ["h0.w", "h0.b", "h1.w", "h1.b", "pi.w", "pi.b", "v.w", "v.b", "log_std"]
    assert arch.n_params == 3 * 64 + 64 + 64 * 64 + 64 + 64 + 1 + 64 + 1 + 1
    assert nn.NetArch.from_dict(arch.to_dict()) == arch


# --- distributions --------------------------------------------------------------------

def test_log_prob_examples():
    assert nn.log_prob(cat(np.zeros(4)), 2) == pytest.approx(math.log(0.25), abs=1e-15)
    assert nn.log_prob(gauss([0.0], [0.0]), np.array([0.0])) == pytest.approx(-0.9189385332046727, abs=1e-15)
    assert abs(nn.log_prob(cat([10.0, -10.0]), 0)) < 1e-4
    # frozen from direct summation on the tiny net's logits
    dist, _ = nn.forward(TINY_PARAMS, TINY, np.array([1.0, 2.0]))
    assert nn.log_prob(dist, 0) == pytest.approx(-3.197766249390498, abs=1e-13)
    assert nn.log_prob(dist, 1) == pytest.approx(-0.04171130478371077, abs=1e-13)


def test_log_prob_rejects_bad_actions():
    with pytest.raises(InputError):
        nn.log_prob(cat([0.0, 0.0]), 2)
    with pytest.raises(InputError):
        nn.log_prob(cat([0.0, 0.0]), -1)
    with pytest.raises(InputError):
        nn.log_prob(gauss([0.0, 0.0], [0.0, 0.0]), np.zeros(3))


def test_kl_examples():
    assert nn.kl(cat([1.0, 2.0]), cat([1.0, 2.0])) == pytest.approx(0.0, abs=1e-15)
    p = cat(np.log([0.5, 0.5]))
    q = cat(np.log([0.25, 0.75]))
    assert nn.kl(p, q) == pytest.approx(0.14384103622589042, abs=1e-12)
    assert nn.kl(gauss([1.0], [0.0]), gauss([0.0], [0.0])) == pytest.approx(0.5, abs=1e-15)


def test_kl_rejects_family_mismatch():
    with pytest.raises(InputError):
        nn.kl(cat([0.0, 0.0]), gauss([0.0], [0.0]))


def test_entropy_examples():
    assert nn.entropy(cat(np.zeros(5))) == pytest.approx(math.log(5), abs=1e-15)
    assert nn.entropy(cat([100.0, 0.0])) == pytest.approx(0.0, abs=1e-40)
    assert nn.entropy(gauss([0.3], [0.0])) == pytest.approx(1.4189385332046727, abs=1e-15)


logits = st.lists(st.floats(-8, 8), min_size=2, max_size=6).map(np.array)


@given(logits)
def test_categorical_probs_sum_to_one(lg):
    assert abs(nn.probs(cat(lg)).sum() - 1.0) < 1e-9


@given(logits)
def test_kl_to_uniform_is_log_k_minus_entropy(lg):
    k = len(lg)
    p = cat(lg)
    assert nn.kl(p, cat(np.zeros(k))) == pytest.approx(math.log(k) - nn.entropy(p), abs=1e-9)


@given(logits, st.integers(0, 2**32 - 1))
def test_kl_nonnegative_and_zero_only_on_identity(lg, seed):
    q = lg + np.random.default_rng(seed).normal(size=len(lg))
    assert nn.kl(cat(lg), cat(q)) >= -1e-12
    assert abs(nn.kl(cat(lg), cat(lg))) <= 1e-12


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_gaussian_entropy_formula(log_std, seed):
    ls = np.array(log_std)
    mu = np.random.default_rng(seed).normal(size=len(ls))
    expected = float(np.sum(0.5 * np.log(2 * np.pi * np.e) + ls))
    assert nn.entropy(gauss(mu, ls)) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("gaussian", [False, True])
def test_kl_matches_monte_carlo_small(gaussian):
    from mcpo.checks import kl_mc_check, random_dist_pair
    rng = np.random.default_rng(11)
    p, q = random_dist_pair(rng, gaussian)
    closed, mean, se = kl_mc_check(p, q, 200_000, np.random.default_rng(12))
    assert abs(closed - mean) <= 3 * se


# --- gradients ------------------------------------------------------------------------

def test_grad_of_half_squared_norm_is_identity():
    x = np.random.default_rng(0).normal(size=7)
    np.testing.assert_allclose(ad.grad(lambda p: ad.mul(0.5, ad.ad_sum(ad.square(p))), x), x, atol=1e-15)


def test_grad_of_constant_is_zero():
    x = np.ones(4)
    np.testing.assert_array_equal(ad.grad(lambda p: np.float64(3.0), x), np.zeros(4))
    np.testing.assert_array_equal(ad.grad(lambda p: ad.mul(0.0, ad.ad_sum(p)), x), np.zeros(4))


@pytest.mark.parametrize("head", ["categorical", "gaussian"])
def test_log_prob_gradient_matches_finite_differences(head):
    arch = nn.NetArch(3, 2, ((5, "tanh"), (4, "tanh")), head)
    rng = np.random.default_rng(3)
    p = rng.normal(scale=0.5, size=arch.n_params)
    s = rng.normal(size=3)
    a = 1 if head == "categorical" else np.array([0.3, -0.7])

    def loss(x):
        return nn.log_prob(nn.forward(x, arch, s)[0], a)
    g = ad.grad(loss, p)
    fd = oracle.finite_diff_grad(lambda x: ad.value_of(loss(x)), p)
    big = np.abs(g) > 1e-6
    assert np.max(np.abs(g[big] - fd[big]) / np.abs(g[big])) <= 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_intermediate_names_the_op():
    with pytest.raises(NumericalError) as err:
        ad.grad(lambda p: ad.ad_sum(ad.log(p)), np.array([1.0, -1.0]))
    assert err.value.op == "log"


# --- Adam -----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    s = nn.AdamState.zeros(3, 0.1)
    p = np.array([1.0, 2.0, 3.0])
    p2, s2 = nn.adam_step(s, p, np.zeros(3))
    np.testing.assert_array_equal(p2, p)
    assert s2.step == 1


def test_adam_first_step_moves_by_step_size_times_sign():
    s = nn.AdamState.zeros(3, 0.01)
    g = np.array([3.0, -0.2, 1e-3])
    p2, _ = nn.adam_step(s, np.zeros(3), g)
    np.testing.assert_allclose(p2, -0.01 * np.sign(g), rtol=1e-4)
    p3, _ = nn.adam_step(s, np.zeros(3), g, maximize=True)
    np.testing.assert_allclose(p3, 0.01 * np.sign(g), rtol=1e-4)


def test_adam_two_steps_match_hand_recursion():
    s = nn.AdamState.zeros(2, 0.1)
    g = np.array([0.5, -2.0])
    p1, s1 = nn.adam_step(s, np.ones(2), g)
    np.testing.assert_allclose(p1, [0.900000002, 1.0999999995], atol=1e-15)
    p2, s2 = nn.adam_step(s1, p1, g)
    np.testing.assert_allclose(p2, [0.8000000040000006, 1.1999999989999994], atol=1e-15)
    assert s2.step == 2
    np.testing.assert_allclose(s2.first_moment, [0.095, -0.38], atol=1e-15)


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NumericalError):
        nn.adam_step(nn.AdamState.zeros(2), np.zeros(2), np.array([np.nan, 0.0]))


@settings(max_examples=25)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_adam_step_counter_increments(n, seed):
    rng = np.random.default_rng(seed)
    s, p = nn.AdamState.zeros(4), rng.normal(size=4)
    for k in range(n):
        p, s = nn.adam_step(s, p, rng.normal(size=4))
        assert s.step == k + 1
