"""Flat-parameter MLPs, action distributions and Adam.

All policy and value parameters of one agent live in a single float64 vector.
The layout is fixed by :class:`NetArch`: hidden layers (weights then bias),
policy head, value head, and for Gaussian policies a state-independent
``log_std`` vector at the end.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericalError

_LOG_2PI = float(np.log(2.0 * np.pi))
_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class NetArch:
    input_dim: int
    action_dim: int
    hidden: tuple = ((64, "tanh"), (64, "tanh"))
    policy_head: str = "categorical"  # or "gaussian"
    value_head: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.action_dim < 1:
            raise ConfigError("input_dim and action_dim must be positive")
        if self.policy_head not in ("categorical", "gaussian"):
            raise ConfigError(f"unknown policy_head {self.policy_head!r}")
        for width, act in self.hidden:
            if width < 1 or act not in _ACTIVATIONS:
                raise ConfigError(f"bad hidden layer ({width}, {act!r})")
        object.__setattr__(self, "hidden", tuple((int(w), str(a)) for w, a in self.hidden))

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.input_dim
        for i, (width, _) in enumerate(self.hidden):
            shapes += [(f"h{i}.w", (fan_in, width)), (f"h{i}.b", (width,))]
            fan_in = width
        shapes += [("pi.w", (fan_in, self.action_dim)), ("pi.b", (self.action_dim,))]
        if self.value_head:
            shapes += [("v.w", (fan_in, 1)), ("v.b", (1,))]
        if self.policy_head == "gaussian":
            shapes.append(("log_std", (self.action_dim,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.layout():
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "action_dim": self.action_dim,
                "hidden": [list(h) for h in self.hidden],
                "policy_head": self.policy_head, "value_head": self.value_head}

    @classmethod
    def from_dict(cls, d: dict) -> "NetArch":
        return cls(input_dim=d["input_dim"], action_dim=d["action_dim"],
                   hidden=tuple(tuple(h) for h in d["hidden"]),
                   policy_head=d["policy_head"], value_head=d["value_head"])


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(arch: NetArch, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal init: sqrt(2) gain in the trunk, 0.01 on the policy head, 1 on the value head."""
    params = np.zeros(arch.n_params)
    gains = {"pi.w": 0.01, "v.w": 1.0}
    for name, (sl, shape) in arch.slices().items():
        if name.endswith(".w"):
            params[sl] = _orthogonal(rng, shape, gains.get(name, np.sqrt(2.0))).ravel()
    return params


@dataclass
class DistParams:
    """Parameters of a (batch of) action distributions.

    ``loc`` holds logits for categorical policies and means for Gaussian ones.
    Leading axes index states. Entries may be ``autodiff.Var``.
    """
    family: str
    loc: object
    log_std: object = None


def _unpack(params, arch: NetArch) -> dict:
    return {name: ad.reshape(ad.take(params, sl), shape) if len(shape) > 1 else ad.take(params, sl)
            for name, (sl, shape) in arch.slices().items()}


def forward(params, arch: NetArch, state):
    """Evaluate the policy distribution and value for one state or a batch of states.

    Returns ``(DistParams, value)``; value is a scalar for a single state and a
    length-n vector for an ``(n, input_dim)`` batch.
    """
    pv = ad.value_of(params)
    state = np.asarray(state, dtype=np.float64)
    if pv.ndim != 1 or pv.shape[0] != arch.n_params:
        raise ConfigError(f"params length {pv.shape} does not match architecture ({arch.n_params})")
    if state.shape[-1] != arch.input_dim:
        raise ConfigError(f"state dim {state.shape[-1]} != input_dim {arch.input_dim}")
    single = state.ndim == 1
    x = state[None, :] if single else state
    w = _unpack(params, arch)
    h = x
    for i, (_, act) in enumerate(arch.hidden):
        h = _ACTIVATIONS[act](ad.add(ad.matmul(h, w[f"h{i}.w"]), w[f"h{i}.b"]))
    loc = ad.add(ad.matmul(h, w["pi.w"]), w["pi.b"])
    value = None
    if arch.value_head:
        value = ad.reshape(ad.add(ad.matmul(h, w["v.w"]), w["v.b"]), (x.shape[0],))
    log_std = w.get("log_std")
    if single:
        loc = ad.take(loc, 0)
        value = ad.take(value, 0) if value is not None else None
    family = "categorical" if arch.policy_head == "categorical" else "diag-gaussian"
    return DistParams(family, loc, log_std), value


def _check_action(dist: DistParams, action):
    loc = ad.value_of(dist.loc)
    if dist.family == "categorical":
        a = np.asarray(action)
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise InputError("categorical action must be an integer index")
            a = a.astype(np.int64)
        if np.any(a < 0) or np.any(a >= loc.shape[-1]):
            raise InputError(f"action index out of range [0, {loc.shape[-1]})")
        if a.shape != loc.shape[:-1]:
            raise InputError(f"action shape {a.shape} does not match batch {loc.shape[:-1]}")
        return a
    a = np.asarray(action, dtype=np.float64)
    if a.shape[-1:] != loc.shape[-1:]:
        raise InputError(f"action dim {a.shape[-1:]} != {loc.shape[-1:]}")
    return a


def log_prob(dist: DistParams, action):
    """log pi(a|s), batched over leading axes."""
    a = _check_action(dist, action)
    if dist.family == "categorical":
        logp = ad.log_softmax(dist.loc, axis=-1)
        if a.ndim == 0:
            return ad.take(logp, int(a))
        return ad.take(logp, (np.arange(a.shape[0]), a))
    return ad.gaussian_logprob(dist.loc, dist.log_std, a)


def _same_family(p: DistParams, q: DistParams):
    if p.family != q.family:
        raise InputError(f"KL between {p.family} and {q.family}")
    if ad.value_of(p.loc).shape[-1] != ad.value_of(q.loc).shape[-1]:
        raise InputError("KL between distributions of different dimension")


def kl(p: DistParams, q: DistParams):
    """Closed-form KL(p || q) per state (summed over action dimensions)."""
    _same_family(p, q)
    if p.family == "categorical":
        lp = ad.log_softmax(p.loc, axis=-1)
        lq = ad.log_softmax(q.loc, axis=-1)
        return ad.ad_sum(ad.mul(ad.exp(lp), ad.sub(lp, lq)), axis=-1)
    # sum_i log(sq/sp) + (sp^2 + (mp-mq)^2) / (2 sq^2) - 1/2
    diff = ad.sub(p.loc, q.loc)
    ratio = ad.exp(ad.mul(2.0, ad.sub(p.log_std, q.log_std)))
    term = ad.add(ad.sub(q.log_std, p.log_std),
                  ad.mul(0.5, ad.add(ratio, ad.mul(ad.square(diff), ad.exp(ad.mul(-2.0, q.log_std))))))
    return ad.sub(ad.ad_sum(term, axis=-1), 0.5 * ad.value_of(diff).shape[-1])


def entropy(dist: DistParams):
    if dist.family == "categorical":
        lp = ad.log_softmax(dist.loc, axis=-1)
        return ad.neg(ad.ad_sum(ad.mul(ad.exp(lp), lp), axis=-1))
    loc = ad.value_of(dist.loc)
    per_state = ad.ad_sum(ad.add(dist.log_std, 0.5 * (_LOG_2PI + 1.0)))
    if loc.ndim == 1:
        return per_state
    return ad.add(per_state, np.zeros(loc.shape[0]))


def probs(dist: DistParams) -> np.ndarray:
    return np.exp(ad.value_of(ad.log_softmax(ad.value_of(dist.loc), axis=-1)))


def sample(dist: DistParams, rng: np.random.Generator):
    """Draw one action per state (plain arrays only)."""
    loc = np.asarray(ad.value_of(dist.loc))
    if dist.family == "categorical":
        p = probs(dist)
        u = rng.random(loc.shape[:-1])
        idx = (np.cumsum(p, axis=-1) < u[..., None]).sum(axis=-1)
        return np.minimum(idx, loc.shape[-1] - 1)
    std = np.exp(np.asarray(ad.value_of(dist.log_std)))
    return loc + std * rng.standard_normal(loc.shape)


def mode(dist: DistParams):
    loc = np.asarray(ad.value_of(dist.loc))
    if dist.family == "categorical":
        return loc.argmax(axis=-1)
    return loc.copy()


# --- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_size: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, step_size: float = 3e-4, **kw) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), step_size, **kw)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray,
              maximize: bool = False) -> tuple[np.ndarray, AdamState]:
    if not (params.shape == gradient.shape == state.first_moment.shape):
        raise InputError("Adam: params, gradient and moments must have equal length")
    if not np.all(np.isfinite(gradient)):
        raise NumericalError("adam_step", "gradient has non-finite entries")
    g = -gradient if maximize else gradient
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.step_size * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, step=step, first_moment=m, second_moment=v)
