"""Run configuration: YAML documents parsed into validated dataclasses.

Every default is written into the parsed result, so ``RunConfig.to_dict()``
is a complete record of what a run used.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .envs import make_env
from .errors import ConfigError
from .mcpo import McpoConfig
from .objectives import ObjectiveConfig

OUTPUT_ROOT_ENV = "MCPO_OUTPUT_ROOT"


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclass
class RunConfig:
    env: str
    objective: ObjectiveConfig
    mcpo: McpoConfig | None = None
    name: str = ""
    horizon: int = 2048
    epochs: int = 10
    batch_size: int = 64
    gamma: float = 0.99
    lam: float = 0.95
    n_actors: int = 4
    lr: float = 3e-4
    total_steps: int = 1_000_000
    seeds: list = field(default_factory=lambda: [0])
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    reward_scaling: bool = False
    output_dir: str = ""
    checkpoint_interval: int = 0      # iterations between checkpoints; 0 = final only
    attention_log_every: int = 10     # updates between attention.csv rows

    def __post_init__(self):
        make_env(self.env)  # validates the id
        if self.objective.kind == "mcpo" and self.mcpo is None:
            self.mcpo = McpoConfig()
        if self.objective.kind != "mcpo" and self.mcpo is not None:
            raise ConfigError("the 'mcpo' section is only valid with algorithm: mcpo")
        for key in ("horizon", "epochs", "batch_size", "n_actors", "total_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.lam <= 1.0:
            raise ConfigError("gamma and lam must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.total_steps < self.horizon * self.n_actors:
            raise ConfigError("total_steps must be >= horizon * n_actors")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        self.seeds = [int(s) for s in self.seeds]
        self.hidden = [int(h) for h in self.hidden]
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.checkpoint_interval < 0 or self.attention_log_every < 1:
            raise ConfigError("checkpoint_interval must be >= 0 and attention_log_every >= 1")
        if not self.name:
            self.name = f"{self.env.replace(':', '')}-{self.objective.kind}"
        if not self.output_dir:
            self.output_dir = default_output_root()

    @property
    def steps_per_iteration(self) -> int:
        return self.horizon * self.n_actors

    @property
    def n_iterations(self) -> int:
        """Outer iterations needed to collect at least ``total_steps`` environment steps."""
        return -(-self.total_steps // self.steps_per_iteration)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("objective", "mcpo")}
        out["algorithm"] = self.objective.kind
        out["objective"] = {k: v for k, v in self.objective.to_dict().items() if k != "kind"}
        if self.mcpo is not None:
            out["mcpo"] = asdict(self.mcpo)
        return out


_TOP_KEYS = {f.name for f in fields(RunConfig)} - {"objective", "mcpo"} | {"algorithm", "objective", "mcpo"}


def _build(cls, section: dict, where: str, **extra):
    known = {f.name for f in fields(cls)}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
    try:
        return cls(**extra, **section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a key/value mapping")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    for key in ("env", "algorithm"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")
    doc = dict(doc)
    kind = doc.pop("algorithm")
    objective = _build(ObjectiveConfig, doc.pop("objective", None) or {}, "objective", kind=kind)
    mcpo_section = doc.pop("mcpo", None)
    mcpo = None
    if mcpo_section is not None:
        if kind != "mcpo":
            raise ConfigError("the 'mcpo' section is only valid with algorithm: mcpo")
        mcpo = _build(McpoConfig, mcpo_section, "mcpo")
    return RunConfig(objective=objective, mcpo=mcpo, **doc)


def parse_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return config_from_dict(doc)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
