"""Independent reference computations used to check the learning code.

Tabular quantities are solved exactly with dense linear algebra; GAE is
evaluated as the literal double sum; gradients by central differences.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .envs import TabularMDP
from .errors import ConfigError


# --- tabular policies ---------------------------------------------------------------

def check_policy(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(f"policy shape {pi.shape} != {(mdp.n_states, mdp.n_actions)}")
    if np.any(pi < 0) or not np.allclose(pi.sum(1), 1.0, atol=1e-12):
        raise ConfigError("policy rows must be probability vectors")
    return pi


def _policy_matrices(mdp: TabularMDP, pi):
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = (pi * mdp.reward).sum(1)
    return P_pi, r_pi


def state_values(mdp: TabularMDP, pi) -> np.ndarray:
    pi = check_policy(mdp, pi)
    P_pi, r_pi = _policy_matrices(mdp, pi)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def exact_return(mdp: TabularMDP, pi) -> float:
    """eta(pi) = initial_dist . V_pi with V_pi = (I - gamma P_pi)^-1 r_pi."""
    return float(mdp.initial_dist @ state_values(mdp, pi))


def visitation(mdp: TabularMDP, pi) -> np.ndarray:
    """Unnormalized discounted visitation rho = (I - gamma P_pi^T)^-1 initial_dist."""
    pi = check_policy(mdp, pi)
    P_pi, _ = _policy_matrices(mdp, pi)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.initial_dist)


def advantages(mdp: TabularMDP, pi) -> np.ndarray:
    v = state_values(mdp, pi)
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return q - v[:, None]


def local_approx(mdp: TabularMDP, pi_old, pi_new) -> float:
    """First-order surrogate eta(old) + sum_s rho_old(s) sum_a pi_new(a|s) A_old(s, a)."""
    pi_new = check_policy(mdp, pi_new)
    rho = visitation(mdp, pi_old)
    return exact_return(mdp, pi_old) + float(rho @ (pi_new * advantages(mdp, pi_old)).sum(1))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row KL(p || q) over the last axis; +inf where q = 0 < p."""
    p, q = np.broadcast_arrays(np.asarray(p, float), np.asarray(q, float))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(-1)


def kl_max(pi_a, pi_b) -> float:
    return float(np.max(kl_rows(pi_a, pi_b)))


def penalty_constant(mdp: TabularMDP, pi_old) -> float:
    """C1 = 4 max|A_old| gamma / (1 - gamma)^2."""
    return 4.0 * np.abs(advantages(mdp, pi_old)).max() * mdp.gamma / (1.0 - mdp.gamma) ** 2


@dataclass
class BoundResult:
    lhs: float
    rhs: float
    holds: bool


def bound_check(mdp: TabularMDP, pi_old, pi_new) -> BoundResult:
    """eta(new) >= L_old(new) - C1 * max_s KL(old || new)."""
    lhs = exact_return(mdp, pi_new)
    d = kl_max(pi_old, pi_new)
    rhs = local_approx(mdp, pi_old, pi_new) - (penalty_constant(mdp, pi_old) * d if d > 0 else 0.0)
    return BoundResult(lhs, rhs, bool(lhs >= rhs - 1e-9))


# --- two-region construction ------------------------------------------------------------

def simplex_grid(n: int, step: float = 0.05) -> np.ndarray:
    """All points of the n-simplex whose coordinates are multiples of ``step``."""
    k = int(round(1.0 / step))
    pts = [c for c in itertools.product(range(k + 1), repeat=n - 1) if sum(c) <= k]
    return np.array([list(c) + [k - sum(c)] for c in pts], dtype=np.float64) / k


def policy_grid(n_states: int, n_actions: int, step: float = 0.05) -> np.ndarray:
    """Every tabular policy whose rows lie on the simplex grid: shape [G, S, A]."""
    rows = simplex_grid(n_actions, step)
    idx = np.stack(np.meshgrid(*[np.arange(len(rows))] * n_states, indexing="ij"), -1)
    return rows[idx.reshape(-1, n_states)]


def _surrogates(mdp: TabularMDP, pi_old, candidates: np.ndarray) -> np.ndarray:
    rho = visitation(mdp, pi_old)
    adv = advantages(mdp, pi_old)
    return exact_return(mdp, pi_old) + np.einsum("s,gsa,sa->g", rho, candidates, adv)


def _kl_max_batch(p, q) -> np.ndarray:
    return kl_rows(p, q).max(-1)


@dataclass
class TwoRegionResult:
    holds: bool
    improvement: float        # eta(theta) - eta(theta_old)
    l1_gap: float             # L1(theta) - L1(psi)
    psi: np.ndarray
    theta: np.ndarray
    psi_value: float          # L2(psi)
    baseline_value: float     # L2(theta_old) = eta(theta_old)


def two_region_improvement(mdp: TabularMDP, pi_old, memory: list, c2: float = 0.0,
                           step: float = 0.05) -> TwoRegionResult:
    """Tabular analog of the memory-constrained update.

    psi maximizes L_old(psi) - C1 * Dmax(old, psi) over grid convex combinations of the
    memory policies (the sampling policy is always a candidate). theta maximizes
    L1(theta) = L_old(theta) - C1 * Dmax(old, theta) - c2 * Dmax(psi, theta) over the
    policy grid. Checks eta(theta) - eta(old) >= L1(theta) - L1(psi).
    """
    pi_old = check_policy(mdp, pi_old)
    mem = [check_policy(mdp, m) for m in memory]
    if not any(np.array_equal(m, pi_old) for m in mem):
        mem.append(pi_old)
    c1 = penalty_constant(mdp, pi_old)

    weights = simplex_grid(len(mem), step)
    psis = np.einsum("gm,msa->gsa", weights, np.stack(mem))
    d_old_psi = _kl_max_batch(pi_old[None], psis)
    l2 = _surrogates(mdp, pi_old, psis) - np.where(d_old_psi > 0, c1 * d_old_psi, 0.0)
    psi = psis[int(np.argmax(l2))]

    def l1(cands):
        pen = c1 * _kl_max_batch(pi_old[None], cands)
        pen = np.where(np.isnan(pen), 0.0, pen)
        if c2 > 0:
            pen = pen + c2 * _kl_max_batch(psi[None], cands)
        return _surrogates(mdp, pi_old, cands) - pen

    grid = policy_grid(mdp.n_states, mdp.n_actions, step)
    vals = l1(grid)
    theta = grid[int(np.argmax(vals))]
    l1_theta = float(vals.max())
    l1_psi = float(l1(psi[None])[0])
    eta_old = exact_return(mdp, pi_old)
    improvement = exact_return(mdp, theta) - eta_old
    gap = l1_theta - l1_psi
    return TwoRegionResult(bool(improvement >= gap - 1e-9), improvement, gap, psi, theta,
                           float(l2.max()), eta_old)


def two_region_improvement_check(mdp: TabularMDP, pi_old, memory: list, c2: float = 0.0,
                                 step: float = 0.05) -> bool:
    return two_region_improvement(mdp, pi_old, memory, c2, step).holds


# --- random instances -------------------------------------------------------------------

def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int = 2,
               gamma: float | None = None) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu = rng.dirichlet(np.ones(n_states))
    if gamma is None:
        gamma = float(rng.uniform(0.5, 0.95))
    return TabularMDP(P, R, gamma, mu)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n_actions, concentration), size=n_states)


# --- GAE and gradients ------------------------------------------------------------------

def gae_bruteforce(rewards, values, dones, bootstrap: float, gamma: float, lam: float,
                   truncated=None, final_values=None) -> np.ndarray:
    """Literal O(T^2) sum of discounted TD residuals, cut at episode boundaries."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    T = len(r)
    trunc = np.zeros(T, bool) if truncated is None else np.asarray(truncated, bool)
    fv = np.zeros(T) if final_values is None else np.asarray(final_values, np.float64)

    def next_value(j):
        if d[j]:
            return fv[j] if trunc[j] else 0.0
        return bootstrap if j == T - 1 else v[j + 1]

    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        for k in range(T - t):
            j = t + k
            delta = r[j] + gamma * next_value(j) - v[j]
            total += (gamma * lam) ** k * delta
            if d[j]:
                break
        adv[t] = total
    return adv


def finite_diff_grad(loss_fn, params, h: float = 1e-5) -> np.ndarray:
    x = np.array(params, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        up = float(loss_fn(x))
        x[i] = orig - h
        down = float(loss_fn(x))
        x[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g


# --- Monte-Carlo estimators ---------------------------------------------------------------

def _sample_rows(rng, cdf: np.ndarray) -> np.ndarray:
    u = rng.random(cdf.shape[0])
    return np.minimum((cdf < u[:, None]).sum(1), cdf.shape[1] - 1)


def mc_return(mdp: TabularMDP, pi, episodes: int, rng: np.random.Generator,
              tol: float = 1e-12) -> tuple[float, float]:
    """Monte-Carlo discounted return: (mean, standard error).

    Episodes are simulated in parallel until gamma^t falls below ``tol``.
    """
    pi = check_policy(mdp, pi)
    horizon = int(np.ceil(np.log(tol) / np.log(mdp.gamma)))
    pi_cdf = np.cumsum(pi, 1)
    p_cdf = np.cumsum(mdp.transition, 2)
    s = _sample_rows(rng, np.broadcast_to(np.cumsum(mdp.initial_dist), (episodes, mdp.n_states)))
    ret = np.zeros(episodes)
    disc = 1.0
    for _ in range(horizon):
        a = _sample_rows(rng, pi_cdf[s])
        ret += disc * mdp.reward[s, a]
        s = _sample_rows(rng, p_cdf[s, a])
        disc *= mdp.gamma
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(episodes))


def mc_kl(logp_fn, logq_fn, samples) -> tuple[float, float]:
    """Monte-Carlo KL(p || q) from samples of p: (mean, standard error)."""
    diff = np.asarray(logp_fn(samples)) - np.asarray(logq_fn(samples))
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size))
