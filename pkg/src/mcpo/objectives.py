"""Baseline constrained-update surrogates and the shared full objective.

Every loss here is a quantity to *maximize*. Functions accept plain arrays or
``autodiff.Var`` parameters, so one definition serves evaluation and gradients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

RATIO_LOG_CLAMP = 60.0
KINDS = ("ppo-clip", "kl-fixed", "kl-adaptive", "mdpo-anneal", "mcpo")
_RELEVANT = {
    "ppo-clip": {"clip_eps"},
    "kl-fixed": {"beta"},
    "kl-adaptive": {"d_targ", "beta"},
    "mdpo-anneal": {"beta0"},
    "mcpo": set(),
}
_REQUIRED = {"ppo-clip": {"clip_eps"}, "kl-fixed": {"beta"}, "kl-adaptive": {"d_targ"},
             "mdpo-anneal": {"beta0"}, "mcpo": set()}


@dataclass
class ObjectiveConfig:
    kind: str
    clip_eps: float | None = None
    beta: float | None = None
    d_targ: float | None = None
    beta0: float | None = None
    c1: float = 0.5
    c2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown algorithm kind {self.kind!r}; expected one of {KINDS}")
        for name in ("clip_eps", "beta", "d_targ", "beta0"):
            if getattr(self, name) is not None and name not in _RELEVANT[self.kind]:
                raise ConfigError(f"objective key {name!r} is not used by kind {self.kind!r}")
        for name in _REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ConfigError(f"objective key {name!r} is required for kind {self.kind!r}")
        if self.kind == "kl-adaptive" and self.beta is None:
            self.beta = 1.0  # initial beta; not given in the source tables
        if self.c1 < 0 or self.c2 < 0:
            raise ConfigError("c1 and c2 must be non-negative")
        if self.clip_eps is not None and not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        for name in ("beta", "d_targ", "beta0"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name in ("kind", "c1", "c2") or f.name in _RELEVANT[self.kind]}


def ratio(logprob_new, logprob_old):
    """Importance ratio exp(new - old); the log-difference is clamped to +-60."""
    diff = ad.sub(logprob_new, logprob_old)
    dv = ad.value_of(diff)
    if np.any(np.abs(dv) > RATIO_LOG_CLAMP):
        log.warning("importance log-ratio beyond +-%g clamped", RATIO_LOG_CLAMP)
        diff = ad.clip(diff, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP)
    return ad.exp(diff)


def ppo_clip_term(tau, adv, eps: float):
    return ad.minimum(ad.mul(tau, adv), ad.mul(ad.clip(tau, 1.0 - eps, 1.0 + eps), adv))


def surrogate(params, arch: nn.NetArch, batch):
    """Returns (dist, value, tau) of ``params`` on the minibatch rows."""
    dist, value = nn.forward(params, arch, batch.obs)
    tau = ratio(nn.log_prob(dist, batch.actions), batch.logprob_old)
    return dist, value, tau


def cpi_loss(batch, params, arch: nn.NetArch):
    _, _, tau = surrogate(params, arch, batch)
    return ad.mean(ad.mul(tau, batch.advantage))


def kl_penalty_loss(batch, params, arch: nn.NetArch, beta: float, old_params=None):
    """mean(tau * A) - beta * mean(KL(pi_old || pi_theta)).

    The old distribution comes from ``old_params`` when given, otherwise from the
    per-row sampling-policy parameters stored in the batch.
    """
    dist, _, tau = surrogate(params, arch, batch)
    old = batch.old_dist() if old_params is None else nn.forward(old_params, arch, batch.obs)[0]
    kl_term = ad.mean(nn.kl(old, dist))
    if not np.isfinite(ad.value_of(kl_term)):
        raise NumericalError("kl_penalty_loss.kl")
    return ad.sub(ad.mean(ad.mul(tau, batch.advantage)), ad.mul(beta, kl_term))


def adaptive_beta_update(beta: float, measured_kl: float, d_targ: float) -> float:
    """PPO-penalty rule: double above 1.5*d_targ, halve below d_targ/1.5; clamp to [1e-4, 1e4]."""
    if measured_kl > 1.5 * d_targ:
        beta *= 2.0
    elif measured_kl < d_targ / 1.5:
        beta /= 2.0
    return float(min(max(beta, 1e-4), 1e4))


def mdpo_anneal_beta(step: int, total: int, beta0: float) -> float:
    return max(0.0, beta0 * (1.0 - step / total))


def value_loss(value, batch):
    return ad.mean(ad.square(ad.sub(value, batch.value_target)))


def full_loss(surrogate_term, value_loss_term, entropy_term, c1: float, c2: float):
    """surrogate - c1 * value_loss + c2 * entropy (to be maximized)."""
    return ad.add(ad.sub(surrogate_term, ad.mul(c1, value_loss_term)), ad.mul(c2, entropy_term))


def baseline_loss(params, arch: nn.NetArch, batch, cfg: ObjectiveConfig, beta: float | None = None):
    """Full objective for the single-trust-region baselines.

    ``beta`` overrides the configured coefficient (adaptive and annealed schemes).
    Returns ``(loss, parts)`` where parts holds the plain-float components.
    """
    dist, value, tau = surrogate(params, arch, batch)
    adv = batch.advantage
    kl_val = 0.0
    if cfg.kind == "ppo-clip":
        surr = ad.mean(ppo_clip_term(tau, adv, cfg.clip_eps))
    else:
        b = cfg.beta if beta is None else beta
        kl_term = ad.mean(nn.kl(batch.old_dist(), dist))
        kl_val = float(ad.value_of(kl_term))
        surr = ad.sub(ad.mean(ad.mul(tau, adv)), ad.mul(b, kl_term))
    vl = value_loss(value, batch)
    ent = ad.mean(nn.entropy(dist))
    loss = full_loss(surr, vl, ent, cfg.c1, cfg.c2)
    parts = {"surrogate": float(ad.value_of(surr)), "value_loss": float(ad.value_of(vl)),
             "entropy": float(ad.value_of(ent)), "kl_old": kl_val}
    return loss, parts
