"""Reward scoring, smoothed preference labels and the JSONL dataset format."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import jsonio
from .numerics import InvalidRangeError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_GAMMA = 10.0


class DegenerateStatsError(ValueError):
    """All rewards in the dataset are equal, so normalization is undefined."""


class MissingLabelError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothedLabel:
    """Soft preference for one pair.

    ``ratio`` is the winner's softmax weight (the weight-to-sensitivity
    ratio), ``gamma`` the sensitivity; the loss scales the DPO margin by
    ``coefficient = (2 * ratio - 1) * gamma``.
    """

    ratio: float
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.ratio < 1.0):
            raise InvalidRangeError(f"ratio must lie in (0, 1), got {self.ratio}")
        if not self.gamma > 0.0:
            raise InvalidRangeError(f"gamma must be positive, got {self.gamma}")

    @property
    def alpha(self) -> float:
        return self.ratio * self.gamma

    @property
    def coefficient(self) -> float:
        return (2.0 * self.ratio - 1.0) * self.gamma

    def swapped(self) -> "SmoothedLabel":
        return SmoothedLabel(1.0 - self.ratio, self.gamma)

    def to_json(self) -> dict:
        return {"ratio": self.ratio, "gamma": self.gamma}


@dataclass(frozen=True)
class RewardStats:
    max: float
    min: float
    count: int

    def __post_init__(self):
        if self.max < self.min:
            raise InvalidRangeError("reward stats need max >= min")
        if self.count < 2:
            raise InvalidRangeError("reward stats need at least two scores")

    @classmethod
    def from_scores(cls, scores: Iterable[float]) -> "RewardStats":
        arr = np.fromiter(scores, dtype=np.float64)
        return cls(float(arr.max()), float(arr.min()), int(arr.size))

    def to_json(self) -> dict:
        return {"max": self.max, "min": self.min, "count": self.count}


@dataclass
class PreferencePair:
    id: str
    condition: np.ndarray
    x_w: np.ndarray
    x_l: np.ndarray
    reward_w: float | None = None
    reward_l: float | None = None
    label: SmoothedLabel | None = None

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.id, self.condition, self.x_l, self.x_w,
                              self.reward_l, self.reward_w,
                              None if self.label is None else self.label.swapped())

    def to_json(self) -> dict:
        return {"id": self.id, "condition": self.condition, "x_w": self.x_w,
                "x_l": self.x_l, "reward_w": self.reward_w, "reward_l": self.reward_l,
                "label": None if self.label is None else self.label.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "PreferencePair":
        lab = d.get("label")
        return cls(id=str(d["id"]),
                   condition=np.asarray(d["condition"], dtype=np.float64),
                   x_w=np.asarray(d["x_w"], dtype=np.float64),
                   x_l=np.asarray(d["x_l"], dtype=np.float64),
                   reward_w=d.get("reward_w"), reward_l=d.get("reward_l"),
                   label=None if lab is None else SmoothedLabel(lab["ratio"], lab["gamma"]))


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    reward_stats: RewardStats | None = None
    reward_kind: str | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def labeled(self) -> bool:
        return bool(self.pairs) and all(p.label is not None for p in self.pairs)

    def header(self) -> dict:
        h = {"schema_version": SCHEMA_VERSION,
             "reward_stats": None if self.reward_stats is None else self.reward_stats.to_json(),
             "reward_kind": self.reward_kind, "seed": self.seed}
        h.update(self.extra)
        return h

    def arrays(self) -> dict[str, np.ndarray]:
        """Stack the pairs into ``(N, d)`` blocks plus per-pair coefficients."""
        coef = np.array([np.nan if p.label is None else p.label.coefficient
                         for p in self.pairs])
        return {"condition": np.stack([p.condition for p in self.pairs]),
                "x_w": np.stack([p.x_w for p in self.pairs]),
                "x_l": np.stack([p.x_l for p in self.pairs]),
                "coefficient": coef}


def write_jsonl(ds: PreferenceDataset, path) -> None:
    lines = [jsonio.dumps(ds.header())]
    lines.extend(jsonio.dumps(p.to_json()) for p in ds.pairs)
    Path(path).write_text("\n".join(lines) + "\n")


def read_jsonl(path) -> PreferenceDataset:
    with open(path) as fh:
        rows = [jsonio.loads(line) for line in fh if line.strip()]
    if not rows or "schema_version" not in rows[0]:
        raise ValueError(f"{path}: missing dataset header line")
    head = rows[0]
    if head["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {head['schema_version']}")
    st = head.get("reward_stats")
    known = {"schema_version", "reward_stats", "reward_kind", "seed"}
    return PreferenceDataset(
        pairs=[PreferencePair.from_json(r) for r in rows[1:]],
        reward_stats=None if st is None else RewardStats(st["max"], st["min"], st["count"]),
        reward_kind=head.get("reward_kind"), seed=head.get("seed"),
        extra={k: v for k, v in head.items() if k not in known})


# -- rewards -----------------------------------------------------------------

@dataclass(frozen=True)
class RewardFunction:
    """Synthetic ground-truth reward, higher is better.

    ``target_distance``: ``-||x0 - target(c)||^2`` with ``target(c) = c``
    unless ``target_fn`` is given.
    ``axis_projection``: ``<x0, axis>``.
    ``custom``: ``fn(x0, c)``.
    Every kind is followed by the affine map ``scale * r + offset``.
    """

    kind: str = "target_distance"
    axis: tuple | None = None
    fn: Callable | None = None
    target_fn: Callable | None = None
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("target_distance", "axis_projection", "custom"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "axis_projection" and self.axis is None:
            raise ValueError("axis_projection needs an axis")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom reward needs fn")

    def affine(self, a: float, b: float) -> "RewardFunction":
        return replace(self, scale=a * self.scale, offset=a * self.offset + b)

    def raw(self, x0, c) -> np.ndarray:
        x0 = np.asarray(x0, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if self.kind == "target_distance":
            target = c if self.target_fn is None else self.target_fn(c)
            if np.shape(target)[-1] != x0.shape[-1]:
                raise InvalidRangeError("target and x0 dimensions differ")
            d = x0 - target
            return -np.sum(d * d, axis=-1)
        if self.kind == "axis_projection":
            return x0 @ np.asarray(self.axis, dtype=np.float64)
        return np.asarray(self.fn(x0, c), dtype=np.float64)

    def __call__(self, x0, c):
        return self.scale * self.raw(x0, c) + self.offset


def score(reward: RewardFunction, x0, c) -> float:
    return float(reward(x0, c))


def bt_prob(r_w: float, r_l: float) -> float:
    """Bradley-Terry probability that the first item wins."""
    d = r_w - r_l
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def normalize_rewards(scores, stats: RewardStats) -> np.ndarray:
    """Map scores into ``[-1, 0]`` using the dataset's max and min."""
    span = stats.max - stats.min
    if not span > 0.0:
        raise DegenerateStatsError("reward stats have max == min")
    return (np.asarray(scores, dtype=np.float64) - stats.max) / span


def weight_ratio(r_w_norm, r_l_norm):
    """Winner's softmax weight over the two normalized rewards."""
    # 1 / (1 + exp(r_l - r_w)) is the same softmax and is exactly symmetric
    d = np.asarray(r_l_norm, dtype=np.float64) - np.asarray(r_w_norm, dtype=np.float64)
    out = 1.0 / (1.0 + np.exp(d))
    return float(out) if out.ndim == 0 else out


def label_dataset(ds: PreferenceDataset, reward: RewardFunction,
                  gamma: float = DEFAULT_GAMMA) -> PreferenceDataset:
    """Score every pair, order winner first, and attach smoothed labels."""
    if not gamma > 0:
        raise InvalidRangeError(f"gamma must be positive, got {gamma}")
    if len(ds) == 0:
        raise InvalidRangeError("cannot label an empty dataset")
    arr = ds.arrays()
    r_a = np.atleast_1d(reward(arr["x_w"], arr["condition"]))
    r_b = np.atleast_1d(reward(arr["x_l"], arr["condition"]))
    stats = RewardStats.from_scores(np.concatenate([r_a, r_b]))
    try:
        n_a = normalize_rewards(r_a, stats)
        n_b = normalize_rewards(r_b, stats)
    except DegenerateStatsError:
        log.warning("all %d rewards are equal; every pair gets ratio 0.5", stats.count)
        n_a = n_b = np.zeros_like(r_a)
    out = []
    for p, ra, rb, na, nb in zip(ds.pairs, r_a, r_b, n_a, n_b):
        if rb > ra:
            x_w, x_l, ra, rb, na, nb = p.x_l, p.x_w, rb, ra, nb, na
        else:
            x_w, x_l = p.x_w, p.x_l
        label = SmoothedLabel(weight_ratio(na, nb), float(gamma))
        out.append(PreferencePair(p.id, p.condition, x_w, x_l, float(ra), float(rb), label))
    return PreferenceDataset(out, stats, reward.kind, ds.seed, dict(ds.extra))


def check_labels(ds: PreferenceDataset, tol: float = 1e-12) -> bool:
    """True when each stored label re-derives from its stored rewards."""
    st = ds.reward_stats
    if st is None:
        return False
    for p in ds.pairs:
        if p.label is None or p.reward_w is None or p.reward_l is None:
            return False
        if st.max > st.min:
            nw, nl = normalize_rewards([p.reward_w, p.reward_l], st)
            ratio = weight_ratio(nw, nl)
        else:
            ratio = 0.5
        if abs(ratio - p.label.ratio) > tol:
            return False
    return True
