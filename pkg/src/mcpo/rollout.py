"""On-policy rollout collection, GAE, and minibatch planning.

Rows of a :class:`RolloutBatch` are actor-major: row ``a * T + t`` holds step
``t`` of actor ``a``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigError, UsageError


@dataclass
class RolloutBatch:
    obs: np.ndarray            # [n, obs_dim]
    actions: np.ndarray        # [n] int or [n, action_dim]
    rewards: np.ndarray        # [n] (after any reward scaling)
    dones: np.ndarray          # [n] episode ended after this step (terminal or truncated)
    truncated: np.ndarray      # [n] ended by time limit
    final_values: np.ndarray   # [n] V(s_final) on truncated rows, else 0
    logprob_old: np.ndarray    # [n]
    value_old: np.ndarray      # [n]
    bootstrap_value: np.ndarray  # [n_actors] V of the state after the last step
    n_actors: int
    horizon: int
    old_loc: np.ndarray = None   # sampling-policy distribution params per row
    old_log_std: np.ndarray = None
    advantage: np.ndarray = None
    value_target: np.ndarray = None
    raw_rewards: np.ndarray = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    def old_dist(self, idx=slice(None)) -> nn.DistParams:
        family = "categorical" if self.old_log_std is None else "diag-gaussian"
        return nn.DistParams(family, self.old_loc[idx], self.old_log_std)

    def rows(self, idx) -> "RolloutBatch":
        """Minibatch view restricted to row indices ``idx`` (GAE fields included)."""
        def pick(a):
            return None if a is None else a[idx]
        return replace(self, obs=self.obs[idx], actions=self.actions[idx], rewards=self.rewards[idx],
                       dones=self.dones[idx], truncated=self.truncated[idx],
                       final_values=self.final_values[idx], logprob_old=self.logprob_old[idx],
                       value_old=self.value_old[idx], old_loc=pick(self.old_loc),
                       advantage=pick(self.advantage), value_target=pick(self.value_target),
                       raw_rewards=pick(self.raw_rewards))


class RewardScaler:
    """Divides rewards by a running std of the discounted return (per actor)."""

    def __init__(self, n_actors: int, gamma: float, eps: float = 1e-8):
        self.gamma, self.eps = gamma, eps
        self.ret = np.zeros(n_actors)
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def __call__(self, actor: int, reward: float, done: bool) -> float:
        self.ret[actor] = self.ret[actor] * self.gamma + reward
        self.count += 1
        delta = self.ret[actor] - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (self.ret[actor] - self.mean)
        var = self.m2 / self.count if self.count > 1 else 1.0
        out = reward / np.sqrt(var + self.eps)
        if done:
            self.ret[actor] = 0.0
        return float(out)

    def get_state(self) -> dict:
        return {"ret": self.ret.tolist(), "count": self.count, "mean": self.mean, "m2": self.m2}

    def set_state(self, s: dict) -> None:
        self.ret = np.array(s["ret"], dtype=np.float64)
        self.count, self.mean, self.m2 = s["count"], s["mean"], s["m2"]


@dataclass
class ActorState:
    """Per-actor bookkeeping carried across rollouts."""
    obs: np.ndarray
    episode_return: float = 0.0
    episode_len: int = 0
    next_reset: int = 0  # episode counter used to derive reset seeds


@dataclass
class EpisodeLog:
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)


def actor_seeds(rng_seed: int, n_actors: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(rng_seed).spawn(n_actors)


def reset_seed(base_seed: int, actor: int, episode: int) -> int:
    return int(np.random.SeedSequence([base_seed, actor, episode]).generate_state(1, np.uint64)[0])


def start_actors(envs: list, base_seed: int) -> list[ActorState]:
    states = []
    for i, env in enumerate(envs):
        states.append(ActorState(obs=env.reset(reset_seed(base_seed, i, 0)), next_reset=1))
    return states


def collect(policy: np.ndarray, arch: nn.NetArch, envs: list, T: int, rng_seed: int,
            actors: list[ActorState] | None = None, base_seed: int = 0,
            reward_scaler: RewardScaler | None = None,
            episodes: EpisodeLog | None = None) -> RolloutBatch:
    """Run the sampling policy for ``T`` steps in every environment.

    Each actor draws actions from its own generator spawned from ``rng_seed``, so the
    batch does not depend on the order in which actors are stepped. Finished
    episodes are reset with seeds derived from ``(base_seed, actor, episode index)``.
    ``actors`` carries observations across calls; when omitted the environments are
    reset first.
    """
    if T < 1 or not envs:
        raise ConfigError("collect needs T >= 1 and at least one environment")
    if not np.all(np.isfinite(policy)):
        raise ConfigError("policy parameters must be finite")
    if actors is None:
        actors = start_actors(envs, base_seed)
    n_act = len(envs)
    rngs = [np.random.default_rng(s) for s in actor_seeds(rng_seed, n_act)]
    gaussian = arch.policy_head == "gaussian"
    n = n_act * T
    obs = np.zeros((n, arch.input_dim))
    actions = np.zeros((n, arch.action_dim)) if gaussian else np.zeros(n, dtype=np.int64)
    rewards, raw = np.zeros(n), np.zeros(n)
    dones, truncs = np.zeros(n, dtype=bool), np.zeros(n, dtype=bool)
    final_obs_rows, final_obs = [], []
    logp = np.zeros(n)
    values = np.zeros(n)
    old_loc = np.zeros((n, arch.action_dim))
    log_std = None
    for t in range(T):
        x = np.stack([a.obs for a in actors])
        dist, v = nn.forward(policy, arch, x)
        loc = np.asarray(dist.loc)
        if gaussian:
            log_std = np.asarray(dist.log_std)
            std = np.exp(log_std)
            act = np.stack([loc[i] + std * rngs[i].standard_normal(arch.action_dim)
                            for i in range(n_act)])
        else:
            p = nn.probs(dist)
            act = np.array([min(int((np.cumsum(p[i]) < rngs[i].random()).sum()), arch.action_dim - 1)
                            for i in range(n_act)])
        lp = np.asarray(nn.log_prob(nn.DistParams(dist.family, loc, log_std), act))
        for i, env in enumerate(envs):
            row = i * T + t
            st = actors[i]
            obs[row], actions[row], logp[row], values[row], old_loc[row] = st.obs, act[i], lp[i], v[i], loc[i]
            try:
                o, r, d = env.step(act[i])
            except UsageError as exc:
                raise UsageError(f"actor {i}: {exc}") from exc
            raw[row] = r
            rewards[row] = reward_scaler(i, r, d) if reward_scaler is not None else r
            st.episode_return += r
            st.episode_len += 1
            dones[row] = d
            if d:
                truncs[row] = env.truncated
                if env.truncated:
                    final_obs_rows.append(row)
                    final_obs.append(o)
                if episodes is not None:
                    episodes.returns.append(st.episode_return)
                    episodes.lengths.append(st.episode_len)
                st.episode_return, st.episode_len = 0.0, 0
                o = env.reset(reset_seed(base_seed, i, st.next_reset))
                st.next_reset += 1
            st.obs = o
    final_values = np.zeros(n)
    if final_obs_rows:
        _, fv = nn.forward(policy, arch, np.stack(final_obs))
        final_values[final_obs_rows] = fv
    _, boot = nn.forward(policy, arch, np.stack([a.obs for a in actors]))
    return RolloutBatch(obs=obs, actions=actions, rewards=rewards, dones=dones, truncated=truncs,
                        final_values=final_values, logprob_old=logp, value_old=values,
                        bootstrap_value=np.asarray(boot, dtype=np.float64), n_actors=n_act,
                        horizon=T, old_loc=old_loc,
                        old_log_std=None if log_std is None else log_std.copy(),
                        raw_rewards=raw)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Fill ``advantage`` and ``value_target`` by the backward GAE recursion.

    delta_t = r_t + gamma * next_value_t - V(s_t), where next_value_t is V(s_{t+1})
    inside an episode, V(s_final) after a time-limit truncation and 0 after a
    terminal state; accumulation restarts at every episode boundary.
    """
    if batch.bootstrap_value is None or len(batch.bootstrap_value) != batch.n_actors:
        raise UsageError("compute_gae needs one bootstrap value per actor")
    if not (0.0 < gamma <= 1.0 and 0.0 < lam <= 1.0):
        raise ConfigError("gamma and lambda must lie in (0, 1]")
    T = batch.horizon
    adv = np.zeros(len(batch))
    for a in range(batch.n_actors):
        sl = slice(a * T, (a + 1) * T)
        adv[sl] = _gae_1d(batch.rewards[sl], batch.value_old[sl], batch.dones[sl],
                          batch.truncated[sl], batch.final_values[sl],
                          float(batch.bootstrap_value[a]), gamma, lam)
    return replace(batch, advantage=adv, value_target=adv + batch.value_old)


def _gae_1d(rewards, values, dones, truncated, final_values, bootstrap, gamma, lam):
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        if dones[t]:
            nv = final_values[t] if truncated[t] else 0.0
            running = 0.0
        else:
            nv = next_value
        delta = rewards[t] + gamma * nv - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def gae_arrays(rewards, values, dones, bootstrap: float, gamma: float, lam: float,
               truncated=None, final_values=None) -> np.ndarray:
    """Single-actor convenience wrapper around the GAE recursion."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    truncated = np.zeros_like(dones) if truncated is None else np.asarray(truncated, dtype=bool)
    final_values = np.zeros_like(rewards) if final_values is None else np.asarray(final_values, float)
    return _gae_1d(rewards, np.asarray(values, float), dones, truncated, final_values,
                   float(bootstrap), gamma, lam)


def normalize_advantages(batch: RolloutBatch, eps: float = 1e-8) -> RolloutBatch:
    adv = batch.advantage
    return replace(batch, advantage=(adv - adv.mean()) / (adv.std() + eps))


@dataclass(frozen=True)
class MinibatchPlan:
    epochs: int
    batch_size: int
    seed: int


def minibatches(batch: RolloutBatch | int, plan: MinibatchPlan) -> list[np.ndarray]:
    """Index sets for ``plan.epochs`` passes; a short final batch is allowed."""
    if plan.batch_size <= 0 or plan.epochs <= 0:
        raise ConfigError("batch_size and epochs must be positive")
    n = batch if isinstance(batch, int) else len(batch)
    rng = np.random.default_rng(plan.seed)
    out = []
    for _ in range(plan.epochs):
        perm = rng.permutation(n)
        out += [perm[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    return out
