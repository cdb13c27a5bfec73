"""Diffusion, Diffusion-DPO and SmPO losses.

Loss builders return a :class:`~smpo_lab.denoiser.LossGraph`; pass it to
:func:`smpo_lab.denoiser.backward` for parameter gradients. Pair arguments
may be a single :class:`PreferencePair` or a dict of stacked arrays with keys
``condition``, ``x_w``, ``x_l`` and (for SmPO) ``coefficient``; per-pair
losses are averaged with equal weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .denoiser import ArchitectureMismatchError, DenoiserModel, LossGraph, Tape
from .diffusion import InversionResult, forward_noise, implied_noise
from .numerics import InvalidRangeError, NoiseSchedule
from .preference import MissingLabelError, PreferencePair

DEFAULT_BETA = 2000.0
LOG2 = float(np.log(2.0))


class TimestepMismatchError(ValueError):
    pass


@dataclass
class PairScoreBreakdown:
    """Per-pair quantities of a preference loss (arrays for batches)."""

    s_w: np.ndarray
    s_l: np.ndarray
    t: np.ndarray
    coefficient: np.ndarray
    beta: float
    loss: np.ndarray
    margin: np.ndarray

    def __len__(self) -> int:
        return int(np.size(self.loss))


def _tape_for(model: DenoiserModel, tape: Tape | None) -> Tape:
    if tape is None:
        return Tape(model)
    if tape.model is not model:
        raise ArchitectureMismatchError("tape records a different model")
    return tape


def _check_ref(model: DenoiserModel, ref: DenoiserModel) -> None:
    if not model.same_architecture(ref):
        raise ArchitectureMismatchError("model and reference architectures differ")


def _pair_arrays(pair):
    if isinstance(pair, PreferencePair):
        coef = None if pair.label is None else np.array([pair.label.coefficient])
        return (pair.condition[None, :], pair.x_w[None, :], pair.x_l[None, :], coef)
    return (np.atleast_2d(pair["condition"]), np.atleast_2d(pair["x_w"]),
            np.atleast_2d(pair["x_l"]), pair.get("coefficient"))


def _rows(a, n):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(n, -1) if a.ndim <= 2 else a


def diffusion_loss(model: DenoiserModel, x0, c, t, eps, sched: NoiseSchedule,
                   tape: Tape | None = None) -> LossGraph:
    """Weighted noise-regression loss, averaged over rows."""
    tape = _tape_for(model, tape)
    x_t = forward_noise(x0, t, eps, sched)
    if np.any(np.asarray(t) < 1):
        raise InvalidRangeError("diffusion loss needs t >= 1")
    pred = tape.eps(model, x_t, t, c)
    per_row = ad.scale(ad.sq_norm_rows(pred - np.asarray(eps)), sched.weight(t))
    return LossGraph(ad.mean(per_row), tape)


def _score(tape, model, ref, latent, target, t, c):
    """``||target - eps_theta||^2 - ||target - eps_ref||^2`` per row."""
    own = ad.sq_norm_rows(target - tape.eps(model, latent, t, c))
    frozen = ad.sq_norm_rows(target - tape.eps(ref, latent, t, c))
    return own - frozen


def dpo_score(model, ref, x0, c, t, eps, sched: NoiseSchedule):
    """Diffusion-DPO score at the forward-noised latent (negative is better)."""
    _check_ref(model, ref)
    x_t = forward_noise(x0, t, eps, sched)
    own = np.sum((eps - model.predict(x_t, t, c)) ** 2, axis=-1)
    frozen = np.sum((eps - ref.predict(x_t, t, c)) ** 2, axis=-1)
    s = own - frozen
    return float(s) if np.ndim(s) == 0 else s


def smpo_score(model, ref, x0, c, t, inversion: InversionResult, sched: NoiseSchedule):
    """SmPO score at the inverted latent, regressing onto the implied noise."""
    _check_ref(model, ref)
    if not np.array_equal(np.asarray(inversion.t), np.broadcast_to(t, np.shape(inversion.t))):
        raise TimestepMismatchError(f"inversion was computed for t={inversion.t}, not {t}")
    x_tilde = np.asarray(value_of(inversion.x_tilde))
    tau = implied_noise(x_tilde, x0, t, sched)
    own = np.sum((tau - model.predict(x_tilde, t, c)) ** 2, axis=-1)
    frozen = np.sum((tau - ref.predict(x_tilde, t, c)) ** 2, axis=-1)
    s = own - frozen
    return float(s) if np.ndim(s) == 0 else s


def _preference_loss(tape, s_w, s_l, coef, beta, t):
    diff = s_w - s_l
    margin = ad.scale(diff, -coef * beta)
    per_pair = ad.softplus(ad.scale(margin, -1.0))
    root = ad.mean(per_pair)
    bd = PairScoreBreakdown(
        s_w=np.asarray(value_of(s_w)), s_l=np.asarray(value_of(s_l)),
        t=np.asarray(t), coefficient=np.asarray(coef, dtype=np.float64),
        beta=float(beta), loss=np.asarray(value_of(per_pair)),
        margin=np.asarray(value_of(margin)))
    return LossGraph(root, tape, bd)


def dpo_loss(model, ref, pair, t, eps_w, eps_l, beta: float, sched: NoiseSchedule,
             tape: Tape | None = None) -> LossGraph:
    """Diffusion-DPO loss with forward-noised latents (coefficient 1)."""
    if not beta > 0:
        raise InvalidRangeError("beta must be positive")
    _check_ref(model, ref)
    tape = _tape_for(model, tape)
    c, x_w, x_l, _ = _pair_arrays(pair)
    n = x_w.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    eps_w, eps_l = _rows(eps_w, n), _rows(eps_l, n)
    s_w = _score(tape, model, ref, forward_noise(x_w, t, eps_w, sched), eps_w, t, c)
    s_l = _score(tape, model, ref, forward_noise(x_l, t, eps_l, sched), eps_l, t, c)
    return _preference_loss(tape, s_w, s_l, np.ones(n), beta, t)


def smpo_loss(model, ref, pair, t, inv_w: InversionResult, inv_l: InversionResult,
              beta: float, sched: NoiseSchedule, tape: Tape | None = None,
              coefficient=None) -> LossGraph:
    """SmPO loss at ReNoise-inverted latents, margin scaled by ``2a - g``.

    If the inversions were recorded on ``tape`` (their ``x_tilde`` is a tape
    node) gradients also flow through the inversion; otherwise the latents
    are constants. ``coefficient`` overrides the pair labels.
    """
    if not beta > 0:
        raise InvalidRangeError("beta must be positive")
    _check_ref(model, ref)
    tape = _tape_for(model, tape)
    c, x_w, x_l, coef = _pair_arrays(pair)
    if coefficient is not None:
        coef = np.broadcast_to(np.asarray(coefficient, dtype=np.float64), (x_w.shape[0],))
    if coef is None or np.any(np.isnan(coef)):
        raise MissingLabelError("SmPO needs a smoothed label on every pair")
    n = x_w.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    for inv in (inv_w, inv_l):
        if not np.array_equal(np.broadcast_to(np.asarray(inv.t), (n,)), t):
            raise TimestepMismatchError("inversion timestep differs from loss timestep")
    lat_w = _as_rows(inv_w.x_tilde, n)
    lat_l = _as_rows(inv_l.x_tilde, n)
    tau_w = implied_noise(lat_w, x_w, t, sched)
    tau_l = implied_noise(lat_l, x_l, t, sched)
    s_w = _score(tape, model, ref, lat_w, tau_w, t, c)
    s_l = _score(tape, model, ref, lat_l, tau_l, t, c)
    return _preference_loss(tape, s_w, s_l, np.asarray(coef, dtype=np.float64), beta, t)


def _as_rows(x, n):
    if isinstance(x, ad.Node):
        if x.value.ndim == 1:
            raise ValueError("tracked latents must be (B, d) blocks")
        return x
    return _rows(x, n)


def pair_loss_from_margin(margin):
    """``-log sigmoid(margin)`` via softplus."""
    return np.logaddexp(0.0, -np.asarray(margin, dtype=np.float64))


def dpo_scalar(logp_w_theta, logp_l_theta, logp_w_ref, logp_l_ref, beta):
    h = beta * ((logp_w_theta - logp_w_ref) - (logp_l_theta - logp_l_ref))
    return np.logaddexp(0.0, -h)


def smoothed_dpo_scalar(logp_w_theta, logp_l_theta, logp_w_ref, logp_l_ref,
                        alpha, gamma, beta):
    """Per-pair smoothed DPO loss evaluated two ways.

    ``direct`` builds the log of each smoothed density,
    ``alpha * log p(own) + (gamma - alpha) * log p(other)``, and feeds them to
    the plain DPO loss. ``reduced`` scales the plain DPO margin by
    ``2 * alpha - gamma``. Normalizers are dropped in both.
    """
    def smoothed(lw, ll):
        return alpha * lw + (gamma - alpha) * ll, (gamma - alpha) * lw + alpha * ll

    sw_theta, sl_theta = smoothed(logp_w_theta, logp_l_theta)
    sw_ref, sl_ref = smoothed(logp_w_ref, logp_l_ref)
    direct = np.logaddexp(0.0, -beta * ((sw_theta - sw_ref) - (sl_theta - sl_ref)))
    reduced = dpo_scalar(logp_w_theta, logp_l_theta, logp_w_ref, logp_l_ref,
                         (2.0 * alpha - gamma) * beta)
    return direct, reduced
