"""In-repo environments with a uniform ``reset(seed)`` / ``step(action)`` interface.

* ``pendulum``: continuous swing-up (m = l = 1, g = 10, torque in [-2, 2], dt = 0.05,
  200-step episodes that only ever truncate).
* ``cartpole``: discrete balance task, +1 per step, 500-step limit.
* ``keydoor``: 6x6 sparse-reward room: pick up the key, open the door, reach the goal.
* ``chain:<n>``: explicit tabular chain, usable both as an environment and as a
  :class:`TabularMDP` for exact evaluation.

``step`` returns ``(obs, reward, done)``. After a ``done`` caused by the time limit
rather than a terminal state, ``env.truncated`` is True.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, UsageError


@dataclass(frozen=True)
class EnvSpec:
    id: str
    obs_dim: int
    discrete: bool
    n_actions: int = 0          # discrete only
    action_dim: int = 0         # continuous only
    low: tuple = ()
    high: tuple = ()
    max_episode_len: int = 200


class Env:
    spec: EnvSpec

    def __init__(self):
        self._t = 0
        self._done = True
        self.truncated = False

    @property
    def t(self) -> int:
        return self._t

    def reset(self, seed: int) -> np.ndarray:
        self._t = 0
        self._done = False
        self.truncated = False
        self._reset(np.random.default_rng(np.uint64(seed % 2**64)))
        return self._obs()

    def step(self, action):
        if self._done:
            raise UsageError(f"{self.spec.id}: step() after episode end; call reset() first")
        reward, terminal = self._step(self._validate(action))
        self._t += 1
        self.truncated = (not terminal) and self._t >= self.spec.max_episode_len
        self._done = terminal or self.truncated
        return self._obs(), float(reward), self._done

    def _validate(self, action):
        if self.spec.discrete:
            a = int(np.asarray(action).reshape(()))
            if not 0 <= a < self.spec.n_actions:
                raise InputError(f"{self.spec.id}: action {a} out of range")
            return a
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        return np.clip(a, self.spec.low, self.spec.high)

    # checkpoint support
    def get_state(self) -> dict:
        return {"t": self._t, "done": self._done, "truncated": self.truncated, **self._get()}

    def set_state(self, state: dict) -> None:
        self._t, self._done, self.truncated = state["t"], state["done"], state["truncated"]
        self._set(state)

    def _reset(self, rng): raise NotImplementedError
    def _step(self, action): raise NotImplementedError
    def _obs(self): raise NotImplementedError
    def _get(self) -> dict: raise NotImplementedError
    def _set(self, state: dict) -> None: raise NotImplementedError


def angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2 * math.pi)) - math.pi


class Pendulum(Env):
    """Swing-up pendulum; angle 0 is upright. Semi-implicit Euler, h = 0.05."""

    def __init__(self, max_speed: float = 8.0, max_torque: float = 2.0, dt: float = 0.05,
                 g: float = 10.0, m: float = 1.0, l: float = 1.0, max_episode_len: int = 200):
        super().__init__()
        self.max_speed, self.max_torque, self.dt = max_speed, max_torque, dt
        self.g, self.m, self.l = g, m, l
        self.spec = EnvSpec("pendulum", 3, False, action_dim=1, low=(-max_torque,),
                            high=(max_torque,), max_episode_len=max_episode_len)
        self.angle, self.speed = 0.0, 0.0

    def _reset(self, rng):
        self.angle = float(rng.uniform(-math.pi, math.pi))
        self.speed = float(rng.uniform(-1.0, 1.0))

    def _step(self, action):
        u = float(action[0])
        th, thdot = self.angle, self.speed
        cost = angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        thdot = thdot + (3 * self.g / (2 * self.l) * math.sin(th)
                         + 3.0 / (self.m * self.l ** 2) * u) * self.dt
        thdot = min(max(thdot, -self.max_speed), self.max_speed)
        self.angle = th + thdot * self.dt
        self.speed = thdot
        return -cost, False

    def energy(self) -> float:
        """Mechanical energy per unit rotational inertia (constant under zero torque)."""
        return 0.5 * self.speed ** 2 + 1.5 * self.g / self.l * math.cos(self.angle)

    def _obs(self):
        return np.array([math.cos(self.angle), math.sin(self.angle), self.speed])

    def _get(self):
        return {"angle": self.angle, "speed": self.speed}

    def _set(self, s):
        self.angle, self.speed = s["angle"], s["speed"]


class CartPole(Env):
    """Classic cart-pole balance; Euler integration with tau = 0.02."""

    gravity, masscart, masspole, length, force_mag, tau = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4

    def __init__(self, max_episode_len: int = 500):
        super().__init__()
        self.spec = EnvSpec("cartpole", 4, True, n_actions=2, max_episode_len=max_episode_len)
        self.state = [0.0, 0.0, 0.0, 0.0]

    def _reset(self, rng):
        self.state = [float(v) for v in rng.uniform(-0.05, 0.05, size=4)]

    def _step(self, action):
        x, x_dot, theta, theta_dot = self.state
        force = self.force_mag if action == 1 else -self.force_mag
        total_mass = self.masspole + self.masscart
        pml = self.masspole * self.length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + pml * theta_dot ** 2 * sin) / total_mass
        thetaacc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos ** 2 / total_mass))
        xacc = temp - pml * thetaacc * cos / total_mass
        x += self.tau * x_dot
        x_dot += self.tau * xacc
        theta += self.tau * theta_dot
        theta_dot += self.tau * thetaacc
        self.state = [x, x_dot, theta, theta_dot]
        failed = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        return 1.0, failed

    def _obs(self):
        return np.array(self.state)

    def _get(self):
        return {"state": list(self.state)}

    def _set(self, s):
        self.state = list(s["state"])


KEYDOOR_LAYOUT = (
    "....#.",
    "....#.",
    "....D.",
    "....#.",
    ".K..#.",
    "S...#G",
)


class KeyDoor(Env):
    """Fully observed key-door room on a fixed 6x6 grid.

    Actions 0-3 move up/right/down/left. Walking onto the key picks it up; walking
    into the door while holding the key opens it (the agent stays put that step).
    Reaching ``G`` ends the episode with reward 1; nothing else is rewarded.

    Observation: one-hot agent cell (36) + one-hot key cell or "held" (37) + door-open flag (1).
    """

    MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

    def __init__(self, max_episode_len: int = 100, layout=KEYDOOR_LAYOUT):
        super().__init__()
        self.layout = tuple(layout)
        self.size = len(self.layout)
        self.n_cells = self.size * self.size
        cells = {ch: (r, c) for r, row in enumerate(self.layout) for c, ch in enumerate(row)
                 if ch in "SKDG"}
        self.start, self.key_cell = cells["S"], cells["K"]
        self.door_cell, self.goal_cell = cells["D"], cells["G"]
        self.spec = EnvSpec("keydoor", 2 * self.n_cells + 2, True, n_actions=4,
                            max_episode_len=max_episode_len)
        self.pos, self.has_key, self.door_open = self.start, False, False

    def _reset(self, rng):
        self.pos, self.has_key, self.door_open = self.start, False, False

    def _step(self, action):
        dr, dc = self.MOVES[action]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        if not (0 <= r < self.size and 0 <= c < self.size) or self.layout[r][c] == "#":
            return 0.0, False
        if (r, c) == self.door_cell and not self.door_open:
            if self.has_key:
                self.door_open = True
            return 0.0, False
        self.pos = (r, c)
        if self.pos == self.key_cell and not self.has_key:
            self.has_key = True
        if self.pos == self.goal_cell:
            return 1.0, True
        return 0.0, False

    def _obs(self):
        obs = np.zeros(self.spec.obs_dim)
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        key_slot = self.n_cells if self.has_key else self.key_cell[0] * self.size + self.key_cell[1]
        obs[self.n_cells + key_slot] = 1.0
        obs[-1] = float(self.door_open)
        return obs

    def _get(self):
        return {"pos": list(self.pos), "has_key": self.has_key, "door_open": self.door_open}

    def _set(self, s):
        self.pos, self.has_key, self.door_open = tuple(s["pos"]), s["has_key"], s["door_open"]

    @classmethod
    def optimal_actions(cls) -> list[int]:
        """Hand-planned shortest action sequence for :data:`KEYDOOR_LAYOUT`."""
        # S(5,0) up, right -> K(4,1); up, up, right, right -> (2,3);
        # right bumps and opens D, right enters D(2,4), right -> (2,5), down x3 -> G(5,5)
        return [0, 1, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2]


# --- tabular MDPs -----------------------------------------------------------------

@dataclass
class TabularMDP:
    transition: np.ndarray     # [S, A, S]
    reward: np.ndarray         # [S, A]
    gamma: float
    initial_dist: np.ndarray   # [S]

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A) or self.initial_dist.shape != (S,):
            raise ConfigError("inconsistent TabularMDP shapes")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(-1), 1.0, atol=1e-12):
            raise ConfigError("transition rows must be probability vectors")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > 1e-12:
            raise ConfigError("initial_dist must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


def chain_mdp(n_states: int, gamma: float, slip: float = 0.1) -> TabularMDP:
    """Chain 0 .. n-1 starting at state 0. Action 0 = left, 1 = right.

    The intended move succeeds with probability ``1 - slip``; otherwise the agent
    moves the other way (clamped at the ends). The last state is an absorbing
    loop paying reward 1 for every action taken there.
    """
    if n_states < 2:
        raise ConfigError("chain needs at least 2 states")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    if not 0.0 <= slip <= 1.0:
        raise ConfigError("slip must lie in [0, 1]")
    S, last = n_states, n_states - 1
    P = np.zeros((S, 2, S))
    for s in range(last):
        left, right = max(s - 1, 0), s + 1
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    P[last, :, last] = 1.0
    R = np.zeros((S, 2))
    R[last, :] = 1.0
    init = np.zeros(S)
    init[0] = 1.0
    return TabularMDP(P, R, gamma, init)


class ChainEnv(Env):
    """Sampling interface over :func:`chain_mdp`; the reward is paid on the action taken."""

    def __init__(self, n_states: int, gamma: float = 0.99, slip: float = 0.1,
                 max_episode_len: int = 100):
        super().__init__()
        self.mdp = chain_mdp(n_states, gamma, slip)
        self.spec = EnvSpec(f"chain:{n_states}", n_states, True, n_actions=2,
                            max_episode_len=max_episode_len)
        self.state = 0
        self._rng = np.random.default_rng(0)

    def _reset(self, rng):
        self._rng = rng
        self.state = int(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))

    def _step(self, action):
        r = self.mdp.reward[self.state, action]
        self.state = int(self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self.state, action]))
        return r, False

    def _obs(self):
        obs = np.zeros(self.mdp.n_states)
        obs[self.state] = 1.0
        return obs

    def _get(self):
        return {"state": self.state, "rng": self._rng.bit_generator.state}

    def _set(self, s):
        self.state = s["state"]
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = s["rng"]


ENV_IDS = ("pendulum", "cartpole", "keydoor", "chain:<n_states>")


def make_env(env_id: str) -> Env:
    if env_id == "pendulum":
        return Pendulum()
    if env_id == "cartpole":
        return CartPole()
    if env_id == "keydoor":
        return KeyDoor()
    if env_id.startswith("chain:"):
        try:
            n = int(env_id.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad chain id {env_id!r}") from None
        return ChainEnv(n)
    raise ConfigError(f"unknown environment {env_id!r}; expected one of {ENV_IDS}")
