"""Win-rate and mean-reward evaluation under shared initial noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..denoiser import ArchitectureMismatchError, DenoiserModel
from ..diffusion import ddim_sample
from ..numerics import NoiseSchedule, SeededRng
from ..preference import RewardFunction


@dataclass
class EvalReport:
    mean_reward_model: float
    mean_reward_ref: float
    win_rate: float
    n_prompts: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def prompts_and_noise(conditions, n_prompts: int, dim: int, seed: int):
    rng = SeededRng(seed, (0xE7A1,))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    pick = rng.integers(0, len(conditions) - 1, size=n_prompts)
    return conditions[pick], rng.normal((n_prompts, dim))


def evaluate(model, ref, reward: RewardFunction, n_prompts: int, sample_steps: int,
             seed: int, conditions, sched: NoiseSchedule, w: float = 1.0) -> EvalReport:
    """Sample both models from the same ``x_T`` per prompt and compare rewards.

    Ties count half a win, so a model evaluated against itself scores 0.5.
    """
    if isinstance(model, DenoiserModel) and isinstance(ref, DenoiserModel):
        if not model.same_architecture(ref):
            raise ArchitectureMismatchError("model and reference architectures differ")
    data_dim = ref.data_dim if isinstance(ref, DenoiserModel) else model.data_dim
    c, x_T = prompts_and_noise(conditions, n_prompts, data_dim, seed)
    xs_m = ddim_sample(model, x_T, c, sample_steps, w, sched)
    xs_r = ddim_sample(ref, x_T, c, sample_steps, w, sched)
    r_m = reward(xs_m, c)
    r_r = reward(xs_r, c)
    wins = np.where(r_m > r_r, 1.0, np.where(r_m == r_r, 0.5, 0.0))
    return EvalReport(float(np.mean(r_m)), float(np.mean(r_r)), float(np.mean(wins)),
                      int(n_prompts), int(seed))
