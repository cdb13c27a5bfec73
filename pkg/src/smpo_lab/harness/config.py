"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .. import jsonio
from ..numerics import InvalidRangeError, make_schedule


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss (CLI exit code 3)."""


@dataclass
class TrainConfig:
    method: str = "smpo"
    beta: float = 2000.0
    gamma: float = 10.0
    inv_steps: int = 9
    inv_guidance: float = 1.0
    renoise_iters: int = 1
    detach_inversion: bool = True
    T: int = 50
    schedule: str = "linear_beta"
    beta_min: float = 2e-3
    beta_max: float = 0.2
    sample_steps: int = 50
    lr: float = 1e-4
    lr_beta_scaling: bool = False
    warmup_steps: int = 100
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_pairs: int = 16
    grad_accum: int = 1
    total_steps: int = 2000
    seed: int = 0
    hidden_dim: int = 64
    depth: int = 3
    activation: str = "tanh"
    t_embedding: int = 16
    pretrain_steps: int = 6000
    pretrain_batch: int = 256
    pretrain_lr: float = 2e-3
    cfg_dropout: float = 0.1
    checkpoint_every: int = 0
    workers: int = 1
    strict: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in ("sft", "dpo", "smpo"):
            raise ConfigError(f"method must be sft, dpo or smpo, got {self.method!r}")
        positive = ("beta", "gamma", "inv_steps", "T", "sample_steps", "lr",
                    "batch_pairs", "grad_accum", "hidden_dim", "depth",
                    "t_embedding", "pretrain_batch", "pretrain_lr", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("warmup_steps", "total_steps", "pretrain_steps", "weight_decay",
                     "renoise_iters", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1)")
        if self.activation not in ("tanh", "silu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def effective_lr(self) -> float:
        return self.lr * (2000.0 / self.beta) if self.lr_beta_scaling else self.lr

    def lr_at(self, step: int) -> float:
        """Linear warm-up: ``lr * min(1, step / warmup_steps)`` for 1-based steps."""
        if self.warmup_steps == 0:
            return self.effective_lr
        return self.effective_lr * min(1.0, step / self.warmup_steps)

    def make_schedule(self):
        try:
            return make_schedule(self.T, self.schedule, self.beta_min, self.beta_max)
        except InvalidRangeError as exc:
            raise ConfigError(str(exc)) from None

    def model_kwargs(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "depth": self.depth,
                "activation": self.activation, "t_embedding": self.t_embedding}

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(jsonio.dumps(self.to_dict()).encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(name: str, raw):
    """Convert a string value to the type of TrainConfig field ``name``."""
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    kind = FIELD_TYPES[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes map to underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = coerce(key, val)
    return out


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig(**{k: coerce(k, v) for k, v in values.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
