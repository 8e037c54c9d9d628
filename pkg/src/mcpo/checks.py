"""Randomized verification suites shared by the CLI (``verify-bound``, ``selftest``) and tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import oracle
from .mcpo import AttentionNet, PolicyMemory, PolicySnapshot, l2_loss_and_grad, l2_objective
from .rollout import RolloutBatch, gae_arrays


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    seconds: float
    worst: float = 0.0          # largest error / smallest margin seen, suite specific
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status}  {self.name:<28} {self.passed:>5}/{self.total:<5} worst={self.worst:.3g}  {self.seconds:.1f}s"


def _timed(name, fn, total):
    t0 = time.perf_counter()
    passed, worst, failures = fn()
    return SuiteResult(name, passed, total, time.perf_counter() - t0, worst, failures)


# --- improvement bounds -------------------------------------------------------------------

def bound_suite(instances: int = 1000, seed: int = 0, max_states: int = 4) -> SuiteResult:
    """eta(new) >= L_old(new) - C1 Dmax on random MDPs and policy pairs.

    A quarter of the pairs are near-deterministic and pointed in opposite directions.
    """
    def body():
        rng = np.random.default_rng(seed)
        passed, worst, failures = 0, np.inf, []
        for i in range(instances):
            s = int(rng.integers(2, max_states + 1))
            a = int(rng.integers(2, 4))
            mdp = oracle.random_mdp(rng, s, a)
            conc = 0.05 if i % 4 == 3 else 1.0
            p_old, p_new = oracle.random_policy(rng, s, a, conc), oracle.random_policy(rng, s, a, conc)
            p_old, p_new = np.clip(p_old, 1e-6, None), np.clip(p_new, 1e-6, None)
            p_old /= p_old.sum(1, keepdims=True)
            p_new /= p_new.sum(1, keepdims=True)
            res = oracle.bound_check(mdp, p_old, p_new)
            worst = min(worst, res.lhs - res.rhs)
            if res.holds:
                passed += 1
            else:
                failures.append(i)
        return passed, worst, failures
    return _timed("bound_check", body, instances)


def two_region_suite(instances: int = 1000, seed: int = 1, max_states: int = 4,
                     step: float = 0.05) -> SuiteResult:
    """Two-region improvement on random 2-action MDPs, for C2 = 0 and C2 = C1.

    State counts cycle through 2..max_states; memory holds 1-3 random policies.
    """
    def body():
        rng = np.random.default_rng(seed)
        passed, worst, failures = 0, np.inf, []
        for i in range(instances):
            s = 2 + i % (max_states - 1)
            mdp = oracle.random_mdp(rng, s, 2)
            pi_old = oracle.random_policy(rng, s, 2)
            memory = [oracle.random_policy(rng, s, 2) for _ in range(int(rng.integers(1, 4)))]
            ok = True
            for c2 in (0.0, oracle.penalty_constant(mdp, pi_old)):
                r = oracle.two_region_improvement(mdp, pi_old, memory, c2=c2, step=step)
                worst = min(worst, r.improvement - r.l1_gap)
                ok &= r.holds
            if ok:
                passed += 1
            else:
                failures.append(i)
        return passed, worst, failures
    return _timed("two_region_improvement", body, instances)


# --- GAE ----------------------------------------------------------------------------------

def gae_suite(instances: int = 100, seed: int = 2, max_len: int = 32) -> SuiteResult:
    def body():
        rng = np.random.default_rng(seed)
        passed, worst, failures = 0, 0.0, []
        for i in range(instances):
            T = int(rng.integers(1, max_len + 1))
            r, v = rng.normal(size=T), rng.normal(size=T)
            d = rng.random(T) < 0.2
            tr = d & (rng.random(T) < 0.5)
            fv = np.where(tr, rng.normal(size=T), 0.0)
            boot = float(rng.normal())
            g, lam = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 1.0))
            fast = gae_arrays(r, v, d, boot, g, lam, truncated=tr, final_values=fv)
            slow = oracle.gae_bruteforce(r, v, d, boot, g, lam, truncated=tr, final_values=fv)
            err = float(np.max(np.abs(fast - slow)))
            worst = max(worst, err)
            if err <= 1e-10:
                passed += 1
            else:
                failures.append(i)
        return passed, worst, failures
    return _timed("gae_equivalence", body, instances)


# --- gradients ----------------------------------------------------------------------------

def _rel_err(g, fd, floor: float = 1e-6) -> float:
    mask = np.abs(g) > floor
    if not mask.any():
        return float(np.max(np.abs(g - fd)))
    return float(np.max(np.abs(g[mask] - fd[mask]) / np.maximum(np.abs(g[mask]), np.abs(fd[mask]))))


def random_grad_case(rng: np.random.Generator, i: int):
    """A random (arch, params, loss) triple; every fourth case is an attention (L2) loss."""
    if i % 4 == 3:
        return _l2_case(rng)
    gaussian = bool(i % 2)
    depth = int(rng.integers(1, 3))
    hidden = tuple((int(rng.integers(2, 6)), ("tanh", "relu")[int(rng.integers(0, 2))]) for _ in range(depth))
    arch = nn.NetArch(int(rng.integers(1, 5)), int(rng.integers(1, 4)) + (0 if gaussian else 1), hidden,
                      "gaussian" if gaussian else "categorical")
    params = rng.normal(scale=0.5, size=arch.n_params)
    states = rng.normal(size=(int(rng.integers(1, 6)), arch.input_dim))
    ref = nn.forward(rng.normal(scale=0.5, size=arch.n_params), arch, states)[0]
    if gaussian:
        actions = rng.normal(size=(states.shape[0], arch.action_dim))
    else:
        actions = rng.integers(0, arch.action_dim, size=states.shape[0])
    kind = i % 3

    def loss(p):
        dist, value = nn.forward(p, arch, states)
        if kind == 0:
            return ad.mean(nn.log_prob(dist, actions))
        if kind == 1:
            return ad.add(ad.mean(nn.entropy(dist)), ad.mean(ad.square(value)))
        return ad.mean(nn.kl(ref, dist))
    return loss, params


def _l2_case(rng: np.random.Generator):
    arch = nn.NetArch(3, 2, ((4, "tanh"),), "gaussian")
    m = int(rng.integers(2, 5))
    memory = PolicyMemory(m)
    for k in range(m):
        memory.append(PolicySnapshot(rng.normal(scale=0.5, size=arch.n_params), k))
    n = 6
    obs = rng.normal(size=(n, 3))
    acts = rng.normal(size=(n, 2))
    old = rng.normal(scale=0.5, size=arch.n_params)
    dist = nn.forward(old, arch, obs)[0]
    batch = RolloutBatch(obs=obs, actions=acts, rewards=np.zeros(n), dones=np.zeros(n, bool),
                         truncated=np.zeros(n, bool), final_values=np.zeros(n),
                         logprob_old=np.asarray(nn.log_prob(dist, acts)), value_old=np.zeros(n),
                         bootstrap_value=np.zeros(1), n_actors=1, horizon=n,
                         advantage=rng.normal(size=n), value_target=np.zeros(n))
    net = AttentionNet(m, 12, dropout=0.0)
    v = rng.normal(size=12)
    phi = rng.normal(scale=0.5, size=net.n_params)

    def loss(p):
        return l2_objective(p, net, v, memory, arch, batch)
    # the engine's path for this loss is l2_loss_and_grad; exercise it directly
    loss.engine_grad = lambda p: l2_loss_and_grad(batch, memory, net, p, v, arch)[1]
    return loss, phi


def grad_suite(cases: int = 20, seed: int = 3, tol: float = 1e-4, h: float = 1e-5) -> SuiteResult:
    def body():
        rng = np.random.default_rng(seed)
        passed, worst, failures = 0, 0.0, []
        for i in range(cases):
            loss, params = random_grad_case(rng, i)
            engine = getattr(loss, "engine_grad", None)
            g = engine(params) if engine else ad.grad(loss, params)
            fd = oracle.finite_diff_grad(lambda p: ad.value_of(loss(p)), params, h)
            err = _rel_err(g, fd)
            worst = max(worst, err)
            if err <= tol:
                passed += 1
            else:
                failures.append(i)
        return passed, worst, failures
    return _timed("grad_vs_finite_diff", body, cases)


# --- KL -----------------------------------------------------------------------------------

def random_dist_pair(rng: np.random.Generator, gaussian: bool):
    if gaussian:
        d = int(rng.integers(1, 4))
        mk = lambda: nn.DistParams("diag-gaussian", rng.normal(size=d), rng.normal(scale=0.3, size=d))  # noqa: E731
    else:
        k = int(rng.integers(2, 6))
        mk = lambda: nn.DistParams("categorical", rng.normal(size=k))  # noqa: E731
    return mk(), mk()


def kl_mc_check(p: nn.DistParams, q: nn.DistParams, samples: int, rng: np.random.Generator):
    """(closed form, Monte-Carlo mean, standard error)."""
    closed = float(nn.kl(p, q))
    if p.family == "categorical":
        idx = rng.choice(len(p.loc), size=samples, p=nn.probs(p))
        lp, lq = np.log(nn.probs(p)), np.log(nn.probs(q))
        mean, se = oracle.mc_kl(lambda a: lp[a], lambda a: lq[a], idx)
    else:
        x = p.loc + np.exp(p.log_std) * rng.standard_normal((samples, len(p.loc)))

        def logpdf(dist):
            return lambda a: nn.log_prob(nn.DistParams("diag-gaussian", np.broadcast_to(dist.loc, a.shape),
                                                       dist.log_std), a)
        mean, se = oracle.mc_kl(logpdf(p), logpdf(q), x)
    return closed, mean, se


def kl_suite(pairs: int = 10, samples: int = 1_000_000, seed: int = 4) -> SuiteResult:
    """``pairs`` categorical and ``pairs`` Gaussian pairs, 3 standard errors.

    Samples for pair i come from their own stream ``[seed, i]``.
    """
    def body():
        rng = np.random.default_rng(seed)
        passed, worst, failures = 0, 0.0, []
        for i in range(2 * pairs):
            p, q = random_dist_pair(rng, gaussian=i >= pairs)
            sampler = np.random.default_rng([seed, i])
            closed, mean, se = kl_mc_check(p, q, samples, sampler)
            z = abs(closed - mean) / se
            worst = max(worst, z)
            if z <= 3.0:
                passed += 1
            else:
                failures.append(i)
        return passed, worst, failures
    return _timed("kl_vs_monte_carlo", body, 2 * pairs)


def selftest(quick: bool = False) -> list[SuiteResult]:
    n = 100 if quick else 1000
    return [bound_suite(n), two_region_suite(n // 5 if quick else 200), gae_suite(), grad_suite(),
            kl_suite(samples=100_000 if quick else 1_000_000)]
