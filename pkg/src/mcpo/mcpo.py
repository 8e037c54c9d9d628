"""Memory-constrained policy optimization.

A bounded FIFO memory holds past parameter vectors. An attention network maps a
12-feature context (distances, estimated returns, entropies and value losses of
the current, sampling and previous virtual policies) to softmax weights over the
occupied memory slots; the weighted sum of snapshots is the virtual policy psi.
The policy is then updated with two KL trust regions, one around the sampling
policy and one around psi, mixed per timestep by alpha_t, with a switching
penalty coefficient. The attention network is trained separately to maximize
the importance-weighted advantage of psi.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, NumericalError
from .objectives import ObjectiveConfig, adaptive_beta_update, full_loss, mdpo_anneal_beta, ratio
from .rollout import RolloutBatch

N_FEATURES = 12
FEATURE_NAMES = (
    "D(theta,psi_old)", "D(theta_old,psi_old)", "D(theta_old,theta)",
    "R(psi_old)", "R(theta_old)", "R(theta)",
    "H(psi_old)", "H(theta_old)", "H(theta)",
    "VL(psi_old)", "VL(theta_old)", "VL(theta)",
)
WRITE_RULES = ("diversity", "diversity-strict", "frequent", "uniform", "sparse")
ATTENTION_VARIANTS = ("learned", "mean", "half-feature")
BETA_RULES = ("switching", "annealed", "adaptive")


@dataclass
class McpoConfig:
    memory_size: int = 10
    beta_min: float = 0.01
    beta_max: float = 10.0
    write_rule: str = "diversity"
    write_interval: int | None = None   # uniform: 10, sparse: 100 when left unset
    attention: str = "learned"
    alpha: float | None = None          # None: per-timestep alpha_t; else fixed value
    beta_rule: str = "switching"
    anneal_beta0: float = 1.0
    adaptive_d_targ: float = 0.03
    dropout: float = 0.5
    attention_lr: float = 3e-4

    def __post_init__(self):
        if self.memory_size < 1:
            raise ConfigError("mcpo.memory_size must be >= 1")
        if not 0.0 < self.beta_min < self.beta_max:
            raise ConfigError("mcpo requires 0 < beta_min < beta_max")
        if self.write_rule not in WRITE_RULES:
            raise ConfigError(f"unknown mcpo.write_rule {self.write_rule!r}; expected one of {WRITE_RULES}")
        if self.write_interval is None and self.write_rule in ("uniform", "sparse"):
            self.write_interval = 10 if self.write_rule == "uniform" else 100
        if self.write_interval is not None and self.write_interval < 1:
            raise ConfigError("mcpo.write_interval must be >= 1")
        if self.attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown mcpo.attention {self.attention!r}; expected one of {ATTENTION_VARIANTS}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("mcpo.alpha must lie in [0, 1]")
        if self.beta_rule not in BETA_RULES:
            raise ConfigError(f"unknown mcpo.beta_rule {self.beta_rule!r}; expected one of {BETA_RULES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("mcpo.dropout must lie in [0, 1)")


# --- memory -----------------------------------------------------------------------

@dataclass(frozen=True)
class PolicySnapshot:
    params: np.ndarray
    created_at_update: int


class PolicyMemory:
    """FIFO of at most ``capacity`` snapshots; slot 0 is the oldest."""

    def __init__(self, capacity: int, entries=()):
        if capacity < 1:
            raise ConfigError("memory capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[PolicySnapshot] = []
        self._matrix = None
        for e in entries:
            self.append(e)

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, snap: PolicySnapshot) -> None:
        if not np.all(np.isfinite(snap.params)):
            raise NumericalError("memory.append", "snapshot is not finite")
        if self.entries and snap.created_at_update <= self.entries[-1].created_at_update:
            raise ValueError("snapshots must be written in increasing update order")
        if self.entries and snap.params.shape != self.entries[0].params.shape:
            raise ConfigError("snapshot length differs from memory contents")
        self.entries.append(snap)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
        self._matrix = None

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([e.params for e in self.entries])
        return self._matrix

    def copy(self) -> "PolicyMemory":
        out = PolicyMemory(self.capacity)
        out.entries = list(self.entries)
        out._matrix = self._matrix
        return out


# --- distances and context ------------------------------------------------------------

@dataclass
class PolicyEval:
    """Outputs of one parameter vector on a minibatch."""
    dist: nn.DistParams
    value: np.ndarray
    logp: np.ndarray


def evaluate(params: np.ndarray, arch: nn.NetArch, batch: RolloutBatch) -> PolicyEval:
    dist, value = nn.forward(params, arch, batch.obs)
    return PolicyEval(dist, np.asarray(value), np.asarray(nn.log_prob(dist, batch.actions)))


def mean_kl(p: nn.DistParams, q: nn.DistParams) -> float:
    d = float(np.mean(nn.kl(p, q)))
    if not np.isfinite(d):
        raise NumericalError("policy_distance")
    return max(d, 0.0)


def policy_distance(a: np.ndarray, b: np.ndarray, arch: nn.NetArch, batch_states) -> float:
    """Mean closed-form KL(pi_a || pi_b) over the given states."""
    states = np.asarray(batch_states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    if states.shape[0] == 0:
        raise ValueError("policy_distance needs at least one state")
    return mean_kl(nn.forward(a, arch, states)[0], nn.forward(b, arch, states)[0])


def context_from_evals(theta: PolicyEval, old: PolicyEval, psi_old: PolicyEval,
                       batch: RolloutBatch) -> np.ndarray:
    adv, target, lp_old = batch.advantage, batch.value_target, batch.logprob_old
    evs = (psi_old, old, theta)
    v = np.empty(N_FEATURES)
    v[0] = mean_kl(theta.dist, psi_old.dist)
    v[1] = mean_kl(old.dist, psi_old.dist)
    v[2] = mean_kl(old.dist, theta.dist)
    for k, ev in enumerate(evs):
        v[3 + k] = np.mean(np.exp(np.clip(ev.logp - lp_old, -60, 60)) * adv)
        v[6 + k] = np.mean(-ev.logp)
        v[9 + k] = np.mean((ev.value - target) ** 2)
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise NumericalError(f"context feature {bad[0] + 1} ({FEATURE_NAMES[bad[0]]})")
    return v


def context_features(theta, theta_old, psi_old, arch: nn.NetArch, minibatch: RolloutBatch) -> np.ndarray:
    """The 12-dimensional context vector computed on one minibatch."""
    if len(minibatch) == 0:
        raise ValueError("context_features needs a nonempty minibatch")
    return context_from_evals(evaluate(theta, arch, minibatch), evaluate(theta_old, arch, minibatch),
                              evaluate(psi_old, arch, minibatch), minibatch)


# --- attention network ----------------------------------------------------------------

@dataclass(frozen=True)
class AttentionNet:
    """input -> N hidden (tanh, dropout) -> N logits, softmax over occupied slots."""
    capacity: int
    input_dim: int = N_FEATURES
    dropout: float = 0.5

    def layout(self):
        n = self.capacity
        return [("w1", (self.input_dim, n)), ("b1", (n,)), ("w2", (n, n)), ("b2", (n,))]

    @property
    def n_params(self) -> int:
        n = self.capacity
        return self.input_dim * n + n + n * n + n

    def init(self, rng: np.random.Generator) -> np.ndarray:
        n, d = self.capacity, self.input_dim
        w1 = rng.standard_normal((d, n)) / np.sqrt(d)
        w2 = rng.standard_normal((n, n)) * 0.01
        return np.concatenate([w1.ravel(), np.zeros(n), w2.ravel(), np.zeros(n)])

    def sample_mask(self, rng: np.random.Generator) -> np.ndarray:
        keep = rng.random(self.capacity) >= self.dropout
        return keep / (1.0 - self.dropout)

    def log_weights(self, phi, v: np.ndarray, n_slots: int, mask: np.ndarray | None = None):
        n, d = self.capacity, self.input_dim
        i1, i2, i3 = d * n, d * n + n, d * n + n + n * n
        w1 = ad.reshape(ad.take(phi, slice(0, i1)), (d, n))
        b1 = ad.take(phi, slice(i1, i2))
        w2 = ad.reshape(ad.take(phi, slice(i2, i3)), (n, n))
        b2 = ad.take(phi, slice(i3, i3 + n))
        h = ad.tanh(ad.add(ad.matmul(v, w1), b1))
        if mask is not None:
            h = ad.dropout(h, mask)
        logits = ad.add(ad.matmul(h, w2), b2)
        # slots past the memory fill level get zero weight
        return ad.log_softmax(ad.take(logits, slice(0, n_slots)))


def attention_weights(net: AttentionNet, phi: np.ndarray, v: np.ndarray, n_slots: int,
                      training: bool = False, rng: np.random.Generator | None = None,
                      mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Simplex weights over the ``n_slots`` occupied slots, and the dropout mask used."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.input_dim,):
        raise ConfigError(f"context vector must have length {net.input_dim}")
    if n_slots < 1:
        return np.zeros(0), None
    if training and mask is None and net.dropout > 0:
        mask = net.sample_mask(rng)
    if not training:
        mask = None
    w = np.exp(net.log_weights(phi, v, n_slots, mask))
    return w, mask


def virtual_policy(weights: np.ndarray, memory: PolicyMemory, fallback: np.ndarray | None = None):
    """Convex combination of the stored snapshots; ``fallback`` when memory is empty."""
    if len(memory) == 0:
        if fallback is None:
            raise ValueError("virtual_policy on an empty memory needs a fallback")
        return np.array(fallback, copy=True)
    return np.asarray(weights, dtype=np.float64) @ memory.matrix()


def memory_write(memory: PolicyMemory, theta, theta_old, psi, arch: nn.NetArch, batch_states,
                 created_at: int, strict: bool = False) -> bool:
    """Diversity-promoting write: store theta iff D(theta, psi) >= D(theta_old, psi)."""
    d_new = policy_distance(theta, psi, arch, batch_states)
    d_old = policy_distance(theta_old, psi, arch, batch_states)
    return _write_if(memory, theta, created_at, d_new > d_old if strict else d_new >= d_old)


def _write_if(memory: PolicyMemory, theta, created_at: int, cond: bool) -> bool:
    if cond:
        memory.append(PolicySnapshot(np.array(theta, copy=True), created_at))
    return bool(cond)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def alpha_t(r_psi, r_old):
    """exp(R_psi) / (exp(R_psi) + exp(R_old)), evaluated as a sigmoid of the difference."""
    return sigmoid(np.asarray(r_psi, dtype=np.float64) - np.asarray(r_old, dtype=np.float64))


def switching_rule(d_old_theta: float, d_old_psi: float, beta_min: float, beta_max: float) -> float:
    return beta_max if d_old_theta > d_old_psi else beta_min


def switching_beta(theta, theta_old, psi, arch: nn.NetArch, batch_states,
                   beta_min: float = 0.01, beta_max: float = 10.0) -> float:
    if not beta_min < beta_max:
        raise ConfigError("beta_min must be smaller than beta_max")
    return switching_rule(policy_distance(theta_old, theta, arch, batch_states),
                          policy_distance(theta_old, psi, arch, batch_states), beta_min, beta_max)


def l1_terms(theta, arch: nn.NetArch, batch: RolloutBatch, old_dist: nn.DistParams,
             psi_dist: nn.DistParams, beta: float, alpha):
    """Two-trust-region surrogate; returns (L1, dist, value, kl_old, kl_psi)."""
    dist, value = nn.forward(theta, arch, batch.obs)
    tau = ratio(nn.log_prob(dist, batch.actions), batch.logprob_old)
    gain = ad.mean(ad.mul(tau, batch.advantage))
    kl_old = nn.kl(old_dist, dist)
    kl_psi = nn.kl(psi_dist, dist)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(batch),))
    penalty = ad.mean(ad.add(ad.mul(1.0 - alpha, kl_old), ad.mul(alpha, kl_psi)))
    l1 = ad.sub(gain, ad.mul(beta, penalty))
    for name, term in (("L1.gain", gain), ("L1.penalty", penalty)):
        if not np.isfinite(ad.value_of(term)):
            raise NumericalError(name)
    return l1, dist, value, kl_old, kl_psi


def l1_loss(minibatch: RolloutBatch, theta, theta_old, psi, arch: nn.NetArch, beta: float, alpha):
    """Ê[tau A] - beta Ê[(1 - alpha) KL(old || theta) + alpha KL(psi || theta)]."""
    old = nn.forward(theta_old, arch, minibatch.obs)[0]
    psi_dist = nn.forward(psi, arch, minibatch.obs)[0]
    return l1_terms(theta, arch, minibatch, old, psi_dist, beta, alpha)[0]


def l2_objective(phi, net: AttentionNet, v: np.ndarray, memory: PolicyMemory, arch: nn.NetArch,
                 minibatch: RolloutBatch, mask: np.ndarray | None = None):
    """Ê[tau(psi_phi) A] with psi_phi = softmax-attention combination of the snapshots."""
    w = ad.exp(net.log_weights(phi, v, len(memory), mask))
    psi = ad.matmul(w, memory.matrix())
    dist, _ = nn.forward(psi, arch, minibatch.obs)
    tau = ratio(nn.log_prob(dist, minibatch.actions), minibatch.logprob_old)
    return ad.mean(ad.mul(tau, minibatch.advantage))


def l2_loss_and_grad(minibatch: RolloutBatch, memory: PolicyMemory, net: AttentionNet, phi: np.ndarray,
                     v: np.ndarray, arch: nn.NetArch, mask: np.ndarray | None = None):
    if len(memory) == 0:
        raise ValueError("L2 needs a nonempty memory")
    return ad.value_and_grad(lambda p: l2_objective(p, net, v, memory, arch, minibatch, mask), phi)


# --- state and update -------------------------------------------------------------------

@dataclass
class McpoState:
    theta: np.ndarray
    theta_old: np.ndarray
    psi_old: np.ndarray
    memory: PolicyMemory
    phi: np.ndarray
    adam_theta: nn.AdamState
    adam_phi: nn.AdamState
    beta_min: float = 0.01
    beta_max: float = 10.0
    update_count: int = 0
    write_count: int = 0
    adaptive_beta: float = 1.0

    def __post_init__(self):
        if not self.beta_min < self.beta_max:
            raise ConfigError("beta_min must be smaller than beta_max")
        n = self.theta.shape
        if self.theta_old.shape != n or self.psi_old.shape != n:
            raise ConfigError("theta, theta_old and psi_old must have equal length")


def attention_net_for(cfg: McpoConfig) -> AttentionNet:
    d = 6 if cfg.attention == "half-feature" else N_FEATURES
    return AttentionNet(cfg.memory_size, d, cfg.dropout)


def init_state(theta: np.ndarray, cfg: McpoConfig, rng: np.random.Generator, lr: float = 3e-4) -> McpoState:
    net = attention_net_for(cfg)
    phi = net.init(rng)
    return McpoState(theta=theta.copy(), theta_old=theta.copy(), psi_old=theta.copy(),
                     memory=PolicyMemory(cfg.memory_size), phi=phi,
                     adam_theta=nn.AdamState.zeros(theta.size, lr),
                     adam_phi=nn.AdamState.zeros(phi.size, cfg.attention_lr),
                     beta_min=cfg.beta_min, beta_max=cfg.beta_max)


def choose_beta(cfg: McpoConfig, state: McpoState, d_old_theta: float, d_old_psi: float,
                total_updates: int) -> float:
    if cfg.beta_rule == "switching":
        return switching_rule(d_old_theta, d_old_psi, state.beta_min, state.beta_max)
    if cfg.beta_rule == "annealed":
        return mdpo_anneal_beta(min(state.update_count, total_updates), total_updates, cfg.anneal_beta0)
    return state.adaptive_beta


def mcpo_update(state: McpoState, cfg: McpoConfig, obj: ObjectiveConfig, arch: nn.NetArch,
                minibatch: RolloutBatch, rng: np.random.Generator, total_updates: int = 1,
                old_eval: PolicyEval | None = None) -> tuple[McpoState, dict]:
    """One minibatch step: build psi, ascend the full L1 in theta, ascend L2 in phi, write memory.

    Returns a new state; the input state is left untouched, also when an error is raised.
    ``old_eval`` may carry a precomputed evaluation of theta_old on the minibatch.
    """
    net = attention_net_for(cfg)
    memory = state.memory
    ev_theta = evaluate(state.theta, arch, minibatch)
    ev_old = old_eval if old_eval is not None else evaluate(state.theta_old, arch, minibatch)
    ev_psi_old = evaluate(state.psi_old, arch, minibatch)
    v = context_from_evals(ev_theta, ev_old, ev_psi_old, minibatch)
    if net.input_dim != N_FEATURES:
        v = v[:net.input_dim]

    # (2) virtual policy
    m = len(memory)
    mask = None
    if m == 0:
        weights = np.zeros(0)
        psi = state.theta_old.copy()
    elif cfg.attention == "mean":
        weights = np.full(m, 1.0 / m)
        psi = virtual_policy(weights, memory)
    else:
        weights, mask = attention_weights(net, state.phi, v, m, training=True, rng=rng)
        psi = virtual_policy(weights, memory)
    ev_psi = evaluate(psi, arch, minibatch)

    # (3) policy step
    adv = minibatch.advantage
    r_old = np.exp(np.clip(ev_old.logp - minibatch.logprob_old, -60, 60)) * adv
    r_psi = np.exp(np.clip(ev_psi.logp - minibatch.logprob_old, -60, 60)) * adv
    alpha = alpha_t(r_psi, r_old) if cfg.alpha is None else np.full(len(minibatch), cfg.alpha)
    d_old_theta = mean_kl(ev_old.dist, ev_theta.dist)
    d_old_psi = mean_kl(ev_old.dist, ev_psi.dist)
    beta = choose_beta(cfg, state, d_old_theta, d_old_psi, total_updates)
    parts = {}

    def theta_objective(th):
        l1, dist, value, kl_o, kl_p = l1_terms(th, arch, minibatch, ev_old.dist, ev_psi.dist, beta, alpha)
        vl = ad.mean(ad.square(ad.sub(value, minibatch.value_target)))
        ent = ad.mean(nn.entropy(dist))
        parts.update(l1=float(ad.value_of(l1)), value_loss=float(ad.value_of(vl)),
                     entropy=float(ad.value_of(ent)), kl_old=float(np.mean(ad.value_of(kl_o))),
                     kl_psi=float(np.mean(ad.value_of(kl_p))))
        return full_loss(l1, vl, ent, obj.c1, obj.c2)

    loss, g_theta = ad.value_and_grad(theta_objective, state.theta)
    theta, adam_theta = nn.adam_step(state.adam_theta, state.theta, g_theta, maximize=True)

    # (4) attention step
    phi, adam_phi, l2 = state.phi, state.adam_phi, float("nan")
    if m > 0 and cfg.attention != "mean":
        l2, g_phi = l2_loss_and_grad(minibatch, memory, net, state.phi, v, arch, mask)
        phi, adam_phi = nn.adam_step(state.adam_phi, state.phi, g_phi, maximize=True)

    # (5) memory write
    update_index = state.update_count + 1
    if cfg.write_rule in ("diversity", "diversity-strict"):
        d_new_psi = mean_kl(evaluate(theta, arch, minibatch).dist, ev_psi.dist)
        d_oldp = mean_kl(ev_old.dist, ev_psi.dist)
        cond = d_new_psi > d_oldp if cfg.write_rule == "diversity-strict" else d_new_psi >= d_oldp
    elif cfg.write_rule == "frequent":
        cond = True
    else:
        cond = update_index % cfg.write_interval == 0
    new_memory = memory.copy() if cond else memory
    wrote = _write_if(new_memory, theta, update_index, cond)

    info = {"loss": loss, "l2": l2, "beta": beta, "alpha_mean": float(np.mean(alpha)),
            "beta_is_max": beta == state.beta_max and cfg.beta_rule == "switching",
            "wrote": wrote, "j_star": int(np.argmax(weights)) if weights.size else -1,
            "d_old_theta": d_old_theta, "d_old_psi": d_old_psi, "context": v, **parts}
    new_state = replace(state, theta=theta, psi_old=psi, memory=new_memory, phi=phi,
                        adam_theta=adam_theta, adam_phi=adam_phi, update_count=update_index,
                        write_count=state.write_count + int(wrote))
    return new_state, info


def end_iteration(state: McpoState, cfg: McpoConfig, measured_kl: float) -> McpoState:
    """theta_old <- theta; adaptive beta bookkeeping for the adaptive-beta variant."""
    beta = state.adaptive_beta
    if cfg.beta_rule == "adaptive":
        beta = adaptive_beta_update(beta, measured_kl, cfg.adaptive_d_targ)
    return replace(state, theta_old=state.theta.copy(), adaptive_beta=beta)
