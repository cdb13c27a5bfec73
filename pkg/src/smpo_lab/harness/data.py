"""Synthetic preference data on 2-D Gaussian mixtures."""

from __future__ import annotations

import numpy as np

from ..numerics import InvalidRangeError, SeededRng
from ..preference import PreferenceDataset, PreferencePair

SIGMA_LOW = 0.3
SIGMA_HIGH = 0.8


def toy_conditions(kind: str) -> np.ndarray:
    """Condition vectors, which double as reward targets.

    Both sets sit well away from the origin, which is the model's reserved
    null condition.
    """
    if kind == "gmm2d":
        return np.array([[1.0, 1.0], [3.0, 1.0], [1.0, 3.0], [3.0, 3.0]])
    if kind == "ring":
        ang = 2.0 * np.pi * np.arange(8) / 8
        return np.stack([2.0 + 1.5 * np.cos(ang), 2.0 + 1.5 * np.sin(ang)], axis=1)
    raise InvalidRangeError(f"unknown toy data kind {kind!r}")


def gen_toy_data(kind: str, n_pairs: int, seed: int) -> PreferenceDataset:
    """Unlabeled pairs: one tight and one loose draw around the condition.

    Slot order is randomized, so ``x_w``/``x_l`` carry no preference until
    :func:`~smpo_lab.preference.label_dataset` reorders them.
    """
    if n_pairs < 1:
        raise InvalidRangeError(f"n_pairs must be >= 1, got {n_pairs}")
    conds = toy_conditions(kind)
    rng = SeededRng(seed, (0xDA7A,))
    k = rng.integers(0, len(conds) - 1, size=n_pairs)
    noise = rng.normal((n_pairs, 2, 2))
    flip = rng.uniform(n_pairs) < 0.5
    pairs = []
    for i in range(n_pairs):
        c = conds[k[i]]
        tight = c + SIGMA_LOW * noise[i, 0]
        loose = c + SIGMA_HIGH * noise[i, 1]
        a, b = (loose, tight) if flip[i] else (tight, loose)
        pairs.append(PreferencePair(f"p{i:07d}", c.copy(), a, b))
    return PreferenceDataset(pairs, None, None, int(seed),
                             {"kind": kind, "conditions": conds.tolist()})


def dataset_conditions(ds: PreferenceDataset) -> np.ndarray:
    if "conditions" in ds.extra:
        return np.asarray(ds.extra["conditions"], dtype=np.float64)
    return np.unique(np.stack([p.condition for p in ds.pairs]), axis=0)


def pooled_samples(ds: PreferenceDataset) -> tuple[np.ndarray, np.ndarray]:
    """All candidates (both slots) with their conditions, for reference training."""
    arr = ds.arrays()
    x = np.concatenate([arr["x_w"], arr["x_l"]])
    c = np.concatenate([arr["condition"], arr["condition"]])
    return x, c
