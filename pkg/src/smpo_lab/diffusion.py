"""Forward noising, deterministic sampling, few-step inversion and ReNoise.

All trajectory updates share one move,
``x_dst = scale * x_src + coeff * eps``, with ``scale = sqrt(abar_dst /
abar_src)`` and ``coeff = sqrt(1 - abar_dst) - scale * sqrt(1 - abar_src)``.
Going down in ``t`` it is the DDIM sampler step; going up it is the DDIM
inversion step. Functions accept a single vector with an integer ``t`` or a
``(B, d)`` block with one ``t`` per row.

Every function here also runs on tape nodes (see :mod:`smpo_lab.autodiff`)
when handed a ``Tape.eps``-style callable, which is how the objectives
optionally differentiate through the inversion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import value_of
from .denoiser import DenoiserModel
from .numerics import InvalidRangeError, NoiseSchedule, check_finite, as_vector

EpsFn = Callable[..., object]

DEFAULT_INV_STEPS = 9
DEFAULT_INV_GUIDANCE = 1.0


class TimestepOrderError(InvalidRangeError):
    pass


def _col(v, x):
    """Shape a per-row coefficient so it broadcasts against ``x``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or np.ndim(value_of(x)) == 1:
        return v.reshape(()) if v.size == 1 else v
    return v.reshape(-1, 1)


def _check_t(t, sched: NoiseSchedule, lo: int = 1):
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise InvalidRangeError("timesteps must be integers")
        t = t.astype(np.int64)
    if np.any(t < lo) or np.any(t > sched.T):
        raise InvalidRangeError(f"timestep outside [{lo}, {sched.T}]")
    return t


def step_coefficients(sched: NoiseSchedule, t_src, t_dst):
    """``(scale, coeff)`` of the move from ``t_src`` to ``t_dst``."""
    ab_src = sched.abar(t_src)
    ab_dst = sched.abar(t_dst)
    scale = np.sqrt(ab_dst / ab_src)
    coeff = np.sqrt(1.0 - ab_dst) - scale * np.sqrt(1.0 - ab_src)
    return scale, coeff


def _move(x, eps, sched, t_src, t_dst):
    scale, coeff = step_coefficients(sched, t_src, t_dst)
    return _col(scale, x) * x + _col(coeff, x) * eps


def _model_eps(model, c, w) -> EpsFn:
    if callable(model) and not isinstance(model, DenoiserModel):
        return model
    return lambda x, t: model.predict(value_of(x), t, c, w)


def forward_noise(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t = 0`` returns ``x0``."""
    t = _check_t(t, sched, lo=0)
    ab = sched.abar(t)
    x0 = np.asarray(x0, dtype=np.float64)
    return _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * eps


def implied_noise(x_tilde, x0, t, sched: NoiseSchedule):
    """Noise that maps ``x0`` onto ``x_tilde`` under :func:`forward_noise`."""
    t = _check_t(t, sched, lo=1)
    ab = sched.abar(t)
    x0 = np.asarray(x0, dtype=np.float64)
    return (x_tilde - _col(np.sqrt(ab), x0) * x0) * _col(1.0 / np.sqrt(1.0 - ab), x0)


def ddim_step(model, x_t, t_from: int, t_to: int, c, w: float, sched: NoiseSchedule):
    """One deterministic sampler step from ``t_from`` down to ``t_to``."""
    t_from = _check_t(t_from, sched, lo=0)
    t_to = _check_t(t_to, sched, lo=0)
    if np.any(t_to >= t_from):
        raise TimestepOrderError(f"need t_to < t_from, got {t_to} >= {t_from}")
    eps = _model_eps(model, c, w)(x_t, t_from)
    return _move(x_t, eps, sched, t_from, t_to)


def ddim_invert_step(model, x_prev, t_prev: int, t_next: int, c, w: float,
                     sched: NoiseSchedule):
    """One inversion step from ``t_prev`` up to ``t_next`` (eps at ``t_prev``)."""
    t_prev = _check_t(t_prev, sched, lo=0)
    t_next = _check_t(t_next, sched, lo=0)
    if np.any(t_next <= t_prev):
        raise TimestepOrderError(f"need t_next > t_prev, got {t_next} <= {t_prev}")
    eps = _model_eps(model, c, w)(x_prev, t_prev)
    return _move(x_prev, eps, sched, t_prev, t_next)


def inversion_grid(t, inv_steps: int) -> np.ndarray:
    """Uniform increasing grid ``0 = t_0 <= ... <= t_k = t`` per row.

    Returns shape ``(k + 1,)`` for scalar ``t`` and ``(k + 1, B)`` otherwise.
    When ``t < k`` the grid is ``0, 1, ..., t`` padded with leading zeros;
    a ``0 -> 0`` move is an exact identity, so padding changes nothing.
    """
    k = int(inv_steps)
    if k < 1:
        raise InvalidRangeError(f"inv_steps must be >= 1, got {inv_steps}")
    scalar = np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=np.int64))[None, :]
    i = np.arange(k + 1, dtype=np.int64)[:, None]
    uniform = (i * tt + k // 2) // k
    padded = np.maximum(0, i - (k - tt))
    grid = np.where(tt >= k, uniform, padded)
    return grid[:, 0] if scalar else grid


def visited(grid_col) -> list[int]:
    return sorted({int(v) for v in np.asarray(grid_col)})


def _run_grid(eps_fn, x, grid, sched):
    """Apply moves along consecutive grid rows; eps is taken at the source."""
    for a, b in zip(grid[:-1], grid[1:]):
        eps = eps_fn(x, a)
        x = _move(x, eps, sched, a, b)
    return x


def ddim_sample(model, x_T, c, steps: int, w: float, sched: NoiseSchedule,
                t_start=None):
    """Deterministic sampling from ``t_start`` (default ``T``) down to 0."""
    if steps < 1:
        raise InvalidRangeError(f"steps must be >= 1, got {steps}")
    t_start = sched.T if t_start is None else t_start
    x = np.asarray(x_T, dtype=np.float64)
    if np.ndim(t_start) == 0 and x.ndim == 2:
        t_start = np.full(x.shape[0], int(t_start))
    t_start = _check_t(t_start, sched, lo=1)
    grid = inversion_grid(t_start, steps)[::-1]
    x = _run_grid(_model_eps(model, c, w), x, grid, sched)
    return check_finite(value_of(x), "sample")


def ddim_invert(model, x0, t, inv_steps: int, c, w: float, sched: NoiseSchedule):
    """Few-step inversion of clean ``x0`` to the estimated latent at step ``t``."""
    x0 = as_vector(x0, what="x0")
    t = _broadcast_t(_check_t(t, sched), x0)
    grid = inversion_grid(t, inv_steps)
    return _run_grid(_model_eps(model, c, w), x0, grid, sched)


def _broadcast_t(t, x):
    if np.ndim(t) == 0 and np.ndim(value_of(x)) == 2:
        return np.full(np.shape(value_of(x))[0], int(t))
    return t


@dataclass
class InversionResult:
    """Inverted latents with fixed-point diagnostics.

    ``x_tilde`` is the ReNoise-corrected latent, ``x_hat`` the plain inversion
    estimate. For a block input every field is per row and ``grid`` is a list
    of per-row grids.
    """

    x_tilde: object
    x_hat: np.ndarray
    t: object
    grid: list
    residual_before: object
    residual_after: object
    x_prev: np.ndarray | None = None

    @property
    def batched(self) -> bool:
        return np.ndim(self.x_hat) == 2

    def detached(self) -> "InversionResult":
        return InversionResult(np.asarray(value_of(self.x_tilde)), self.x_hat, self.t,
                               self.grid, self.residual_before, self.residual_after,
                               self.x_prev)


def renoise_invert(model, x0, t, inv_steps: int, c, w: float, sched: NoiseSchedule,
                   renoise_iters: int = 1, eps_fn: EpsFn | None = None) -> InversionResult:
    """Inversion followed by ReNoise fixed-point correction of the final step.

    With ``x_prev`` the inverted latent one grid point below ``t``, the final
    latent should satisfy ``z = scale * x_prev + coeff * eps(z, t)``. The
    plain inversion ``x_hat`` evaluates eps at ``x_prev`` instead; each
    ReNoise iteration substitutes the current estimate of ``z``. Residuals
    measure the fixed-point violation before and after the correction.

    ``eps_fn`` overrides the model call (used to record the inversion on a
    tape); residuals are always computed on plain values.
    """
    if renoise_iters < 0:
        raise InvalidRangeError("renoise_iters must be >= 0")
    x0 = as_vector(x0, what="x0")
    t = _broadcast_t(_check_t(t, sched), x0)
    grid = inversion_grid(t, inv_steps)
    plain = _model_eps(model, c, w)
    fn = eps_fn or plain
    x_prev = _run_grid(fn, x0, grid[:-1], sched)
    t_prev = grid[-2]
    x_hat = _move(x_prev, fn(x_prev, t_prev), sched, t_prev, t)
    scale, coeff = step_coefficients(sched, t_prev, t)
    base = _col(scale, x0) * x_prev

    z = x_hat
    for _ in range(renoise_iters):
        z = base + _col(coeff, x0) * fn(z, t)

    base_v = value_of(base)
    coeff_v = _col(coeff, x0)

    def residual(zv):
        r = zv - (base_v + coeff_v * plain(zv, t))
        return np.sqrt(np.sum(r * r, axis=-1))

    x_hat_v = np.asarray(value_of(x_hat))
    z_v = np.asarray(value_of(z))
    check_finite(z_v, "inverted latent")
    if grid.ndim == 1:
        grid_list = visited(grid)
    else:
        grid_list = [visited(grid[:, j]) for j in range(grid.shape[1])]
    return InversionResult(
        x_tilde=z, x_hat=x_hat_v, t=t, grid=grid_list,
        residual_before=residual(x_hat_v), residual_after=residual(z_v),
        x_prev=np.asarray(value_of(x_prev)))


def reconstruct(model, x_t, t, steps: int, c, w: float, sched: NoiseSchedule):
    """Sample back to ``t = 0`` from a latent at step ``t``."""
    return ddim_sample(model, x_t, c, steps, w, sched, t_start=t)
