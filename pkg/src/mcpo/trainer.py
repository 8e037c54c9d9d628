"""Outer training loop shared by MCPO and the single-trust-region baselines.

One iteration: collect ``horizon`` steps per actor with the sampling policy,
compute GAE, normalize advantages once, run ``epochs`` passes of minibatch
updates, then make the current policy the new sampling policy.

All randomness is derived from ``(seed, iteration, stream)``, so an iteration's
outcome depends only on the state at its start. That is what makes checkpoint
resumption bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from . import mcpo as M
from .config import RunConfig
from .envs import make_env
from .errors import CheckpointError
from .objectives import adaptive_beta_update, baseline_loss, mdpo_anneal_beta
from .rollout import (ActorState, EpisodeLog, MinibatchPlan, RewardScaler, collect, compute_gae,
                      minibatches, normalize_advantages, start_actors)

STREAM_INIT, STREAM_RESET, STREAM_ROLLOUT, STREAM_PERM, STREAM_UPDATE = range(5)
RETURN_WINDOW = 100


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def arch_for(env_id: str, cfg: RunConfig) -> nn.NetArch:
    spec = make_env(env_id).spec
    hidden = tuple((h, cfg.activation) for h in cfg.hidden)
    if spec.discrete:
        return nn.NetArch(spec.obs_dim, spec.n_actions, hidden, "categorical")
    return nn.NetArch(spec.obs_dim, spec.action_dim, hidden, "gaussian")


@dataclass
class BaselineState:
    theta: np.ndarray
    theta_old: np.ndarray
    adam_theta: nn.AdamState
    beta: float | None = None
    update_count: int = 0


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else None


class Trainer:
    def __init__(self, cfg: RunConfig, seed: int):
        self.cfg, self.seed = cfg, int(seed)
        self.envs = [make_env(cfg.env) for _ in range(cfg.n_actors)]
        self.arch = arch_for(cfg.env, cfg)
        self.is_mcpo = cfg.objective.kind == "mcpo"
        rng = np.random.default_rng(derive_seed(self.seed, STREAM_INIT))
        theta = nn.init_params(self.arch, rng)
        if self.is_mcpo:
            self.state = M.init_state(theta, cfg.mcpo, rng, cfg.lr)
        else:
            self.state = BaselineState(theta, theta.copy(), nn.AdamState.zeros(theta.size, cfg.lr),
                                       beta=cfg.objective.beta)
        self.actors = start_actors(self.envs, derive_seed(self.seed, STREAM_RESET))
        self.reward_scaler = RewardScaler(cfg.n_actors, cfg.gamma) if cfg.reward_scaling else None
        self.recent_returns: list[float] = []
        self.episodes_total = 0
        self.iteration = 0
        self.env_steps = 0
        n = cfg.steps_per_iteration
        self.updates_per_iteration = cfg.epochs * math.ceil(n / cfg.batch_size)
        self.total_updates = max(1, cfg.n_iterations * self.updates_per_iteration)

    # --- one outer iteration ---------------------------------------------------------

    def run_iteration(self) -> tuple[dict, list[dict]]:
        cfg, it = self.cfg, self.iteration
        log = EpisodeLog()
        batch = collect(self.state.theta_old, self.arch, self.envs, cfg.horizon,
                        derive_seed(self.seed, STREAM_ROLLOUT, it), actors=self.actors,
                        base_seed=derive_seed(self.seed, STREAM_RESET),
                        reward_scaler=self.reward_scaler, episodes=log)
        batch = normalize_advantages(compute_gae(batch, cfg.gamma, cfg.lam))
        plan = MinibatchPlan(cfg.epochs, cfg.batch_size, derive_seed(self.seed, STREAM_PERM, it))
        rng = np.random.default_rng(derive_seed(self.seed, STREAM_UPDATE, it))
        infos, attention_rows = [], []
        writes_before = getattr(self.state, "write_count", 0)
        for idx in minibatches(batch, plan):
            mb = batch.rows(idx)
            if self.is_mcpo:
                info = self._mcpo_step(mb, rng)
                if self.state.update_count % cfg.attention_log_every == 0:
                    attention_rows.append({
                        "update": self.state.update_count, "iteration": it + 1,
                        "j_star": info["j_star"], "n_slots": len(self.state.memory),
                        "alpha_mean": info["alpha_mean"], "beta": info["beta"],
                        "wrote": int(info["wrote"])})
            else:
                info = self._baseline_step(mb)
            infos.append(info)

        measured_kl = M.mean_kl(batch.old_dist(), nn.forward(self.state.theta, self.arch, batch.obs)[0])
        if self.is_mcpo:
            self.state = M.end_iteration(self.state, cfg.mcpo, measured_kl)
        else:
            beta = self.state.beta
            if cfg.objective.kind == "kl-adaptive":
                beta = adaptive_beta_update(beta, measured_kl, cfg.objective.d_targ)
            self.state = replace(self.state, theta_old=self.state.theta.copy(), beta=beta)

        self.iteration += 1
        self.env_steps += cfg.steps_per_iteration
        self.episodes_total += len(log.returns)
        self.recent_returns = (self.recent_returns + log.returns)[-RETURN_WINDOW:]
        record = self._record(infos, measured_kl, writes_before)
        for row in attention_rows:
            row["env_steps"] = self.env_steps
        return record, attention_rows

    def _mcpo_step(self, mb, rng) -> dict:
        old_eval = M.PolicyEval(mb.old_dist(), mb.value_old, mb.logprob_old)
        self.state, info = M.mcpo_update(self.state, self.cfg.mcpo, self.cfg.objective, self.arch, mb,
                                         rng, self.total_updates, old_eval=old_eval)
        return info

    def _baseline_step(self, mb) -> dict:
        cfg, st = self.cfg.objective, self.state
        beta = None
        if cfg.kind == "mdpo-anneal":
            beta = mdpo_anneal_beta(min(st.update_count, self.total_updates), self.total_updates, cfg.beta0)
        elif cfg.kind == "kl-adaptive":
            beta = st.beta
        parts = {}

        def objective(th):
            loss, p = baseline_loss(th, self.arch, mb, cfg, beta)
            parts.update(p)
            return loss

        loss, g = ad.value_and_grad(objective, st.theta)
        theta, adam = nn.adam_step(st.adam_theta, st.theta, g, maximize=True)
        self.state = replace(st, theta=theta, adam_theta=adam, update_count=st.update_count + 1)
        return {"loss": loss, "beta": beta if beta is not None else cfg.beta, **parts}

    def _record(self, infos: list[dict], measured_kl: float, writes_before: int) -> dict:
        rets = self.recent_returns
        rec = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "episodes": self.episodes_total,
            "episode_return": float(np.mean(rets)) if rets else None,
            "success_rate": float(np.mean([r > 0 for r in rets])) if rets else None,
            "loss": _mean([i["loss"] for i in infos]),
            "surrogate": _mean([i.get("surrogate", i.get("l1")) for i in infos]),
            "value_loss": _mean([i["value_loss"] for i in infos]),
            "entropy": _mean([i["entropy"] for i in infos]),
            "kl_old": _mean([i.get("kl_old") for i in infos]),
            "measured_kl": measured_kl,
            "beta": _mean([i.get("beta") for i in infos]),
        }
        if self.is_mcpo:
            st = self.state
            rec.update({
                "kl_psi": _mean([i["kl_psi"] for i in infos]),
                "l2": _mean([i["l2"] for i in infos]),
                "alpha_mean": _mean([i["alpha_mean"] for i in infos]),
                "beta_max_fraction": float(np.mean([i["beta_is_max"] for i in infos])),
                "memory_size": len(st.memory),
                "write_count": st.write_count - writes_before,
                "writes_total": st.write_count,
                "j_star": infos[-1]["j_star"],
                "d_old_theta": _mean([i["d_old_theta"] for i in infos]),
                "d_old_psi": _mean([i["d_old_psi"] for i in infos]),
            })
        return rec

    # --- serialization ---------------------------------------------------------------

    def save(self, path) -> None:
        st = self.state
        arrays = {"theta": st.theta, "theta_old": st.theta_old,
                  "adam_theta.m": st.adam_theta.first_moment, "adam_theta.v": st.adam_theta.second_moment}
        header = {
            "algorithm": self.cfg.objective.kind, "env": self.cfg.env, "arch": self.arch.to_dict(),
            "seed": self.seed, "config": self.cfg.to_dict(),
            "counters": {"iteration": self.iteration, "env_steps": self.env_steps,
                         "episodes_total": self.episodes_total,
                         "update_count": st.update_count},
            "adam_theta": _adam_meta(st.adam_theta),
            "actors": [{"env": env.get_state(), "obs": [float(x) for x in a.obs],
                        "episode_return": a.episode_return, "episode_len": a.episode_len,
                        "next_reset": a.next_reset} for env, a in zip(self.envs, self.actors)],
            "recent_returns": [float(r) for r in self.recent_returns],
            "reward_scaler": self.reward_scaler.get_state() if self.reward_scaler else None,
        }
        if self.is_mcpo:
            arrays.update({"psi_old": st.psi_old, "phi": st.phi,
                           "adam_phi.m": st.adam_phi.first_moment, "adam_phi.v": st.adam_phi.second_moment})
            for i, e in enumerate(st.memory.entries):
                arrays[f"memory.{i}"] = e.params
            header["mcpo"] = {"adam_phi": _adam_meta(st.adam_phi),
                              "memory_capacity": st.memory.capacity,
                              "memory_created_at": [e.created_at_update for e in st.memory.entries],
                              "write_count": st.write_count, "adaptive_beta": st.adaptive_beta,
                              "beta_min": st.beta_min, "beta_max": st.beta_max}
        else:
            header["beta"] = st.beta
        checkpoint.save(path, header, arrays)

    def load(self, path) -> None:
        header, arrays = checkpoint.load(path)
        if header.get("arch") != self.arch.to_dict():
            raise CheckpointError(f"{path}: architecture {header.get('arch')} does not match {self.arch.to_dict()}")
        if header.get("algorithm") != self.cfg.objective.kind or header.get("env") != self.cfg.env:
            raise CheckpointError(f"{path}: checkpoint is for {header.get('algorithm')} on {header.get('env')}")
        c = header["counters"]
        adam_theta = _adam_from(header["adam_theta"], arrays["adam_theta.m"], arrays["adam_theta.v"])
        if self.is_mcpo:
            m = header["mcpo"]
            memory = M.PolicyMemory(m["memory_capacity"])
            for i, created in enumerate(m["memory_created_at"]):
                memory.append(M.PolicySnapshot(arrays[f"memory.{i}"], created))
            state = M.McpoState(theta=arrays["theta"], theta_old=arrays["theta_old"],
                                psi_old=arrays["psi_old"], memory=memory, phi=arrays["phi"],
                                adam_theta=adam_theta,
                                adam_phi=_adam_from(m["adam_phi"], arrays["adam_phi.m"], arrays["adam_phi.v"]),
                                beta_min=m["beta_min"], beta_max=m["beta_max"],
                                update_count=c["update_count"], write_count=m["write_count"],
                                adaptive_beta=m["adaptive_beta"])
        else:
            state = BaselineState(arrays["theta"], arrays["theta_old"], adam_theta,
                                  header["beta"], c["update_count"])
        actors = []
        for env, a in zip(self.envs, header["actors"]):
            env.set_state(a["env"])
            actors.append(ActorState(np.array(a["obs"], dtype=np.float64), a["episode_return"],
                                     a["episode_len"], a["next_reset"]))
        if len(actors) != len(self.envs):
            raise CheckpointError(f"{path}: actor count mismatch")
        if header["reward_scaler"] is not None:
            if self.reward_scaler is None:
                raise CheckpointError(f"{path}: checkpoint uses reward scaling, config does not")
            self.reward_scaler.set_state(header["reward_scaler"])
        self.state, self.actors = state, actors
        self.iteration, self.env_steps = c["iteration"], c["env_steps"]
        self.episodes_total = c["episodes_total"]
        self.recent_returns = list(header["recent_returns"])


def _adam_meta(a: nn.AdamState) -> dict:
    return {"step": a.step, "step_size": a.step_size, "beta1": a.beta1, "beta2": a.beta2,
            "epsilon": a.epsilon}


def _adam_from(meta: dict, m: np.ndarray, v: np.ndarray) -> nn.AdamState:
    return nn.AdamState(meta["step"], m, v, meta["step_size"], meta["beta1"], meta["beta2"], meta["epsilon"])


def load_policy(path) -> tuple[dict, nn.NetArch, np.ndarray]:
    """Header, architecture and current policy parameters from a training checkpoint."""
    header, arrays = checkpoint.load(path)
    return header, nn.NetArch.from_dict(header["arch"]), arrays["theta"]
