"""Self-checks exposed on the command line: gradients and the smoothing identity."""

from __future__ import annotations

import numpy as np

from .. import objectives
from ..denoiser import DenoiserModel, Tape, backward
from ..diffusion import renoise_invert
from ..numerics import SeededRng, make_schedule


def finite_difference(loss_fn, model: DenoiserModel, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every parameter."""
    flat = model.flat_params()
    out = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        model.set_flat_params(flat)
        up = loss_fn()
        flat[i] = old - h
        model.set_flat_params(flat)
        down = loss_fn()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    model.set_flat_params(flat)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor * max|n|)``."""
    scale = max(float(np.max(np.abs(numeric))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def small_problem(seed: int, T: int = 20, batch: int = 3, activation: str = "tanh"):
    """A random sub-1000-parameter model, its perturbed reference and a batch."""
    rng = SeededRng(seed, (0x6C,))
    sched = make_schedule(T, "linear_beta", 0.002, 0.3)
    ref = DenoiserModel(2, 2, T, hidden_dim=12, depth=2, t_embedding=4,
                        activation=activation, seed=seed)
    for W in ref.weights:
        W *= 2.0
    for b in ref.biases:
        b += 0.1 * rng.normal(b.shape)
    model = ref.copy()
    for p in model.parameters():
        p += 0.1 * rng.normal(p.shape)
    pair = {"condition": rng.normal((batch, 2)), "x_w": rng.normal((batch, 2)),
            "x_l": rng.normal((batch, 2)),
            "coefficient": rng.uniform(batch) * 8.0 - 4.0}
    t = rng.integers(1, T, size=batch)
    eps = rng.normal((2, batch, 2))
    beta = float(0.5 + 2.5 * rng.uniform())
    return model, ref, sched, pair, t, eps, beta


def gradcheck(objective: str, seed: int, h: float = 1e-5, detach: bool = True,
              activation: str = "tanh") -> float:
    """Max relative error between tape gradients and central differences."""
    model, ref, sched, pair, t, eps, beta = small_problem(seed, activation=activation)
    c = pair["condition"]
    if objective == "diffusion":
        def build():
            return objectives.diffusion_loss(model, pair["x_w"], c, t, eps[0], sched)
    elif objective == "dpo":
        def build():
            return objectives.dpo_loss(model, ref, pair, t, eps[0], eps[1], beta, sched)
    elif objective == "smpo":
        if detach:
            inv = [renoise_invert(model, pair[k], t, 4, c, 1.0, sched) for k in ("x_w", "x_l")]

            def build():
                return objectives.smpo_loss(model, ref, pair, t, inv[0], inv[1], beta, sched)
        else:
            def build():
                tape = Tape(model)
                fn = lambda x, tt: tape.eps(model, x, tt, c, 1.0)  # noqa: E731
                inv = [renoise_invert(model, pair[k], t, 4, c, 1.0, sched, eps_fn=fn)
                       for k in ("x_w", "x_l")]
                return objectives.smpo_loss(model, ref, pair, t, inv[0], inv[1], beta,
                                            sched, tape)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    analytic = backward(model, build()).flat()
    numeric = finite_difference(lambda: build().value, model, h)
    return relative_error(analytic, numeric)


def identity_sweep(n: int, seed: int) -> float:
    """Max ``|direct - reduced|`` of the smoothed DPO loss over random inputs.

    Log-probabilities are uniform on [-5, 5], gamma on [0.1, 20], alpha on
    (0, gamma) and beta log-uniform on [1e-2, 1e2].
    """
    rng = SeededRng(seed, (0x1D,))
    lp = rng.uniform((4, n)) * 10.0 - 5.0
    gamma = 0.1 + 19.9 * rng.uniform(n)
    alpha = gamma * rng.uniform(n)
    beta = 10.0 ** (4.0 * rng.uniform(n) - 2.0)
    direct, reduced = objectives.smoothed_dpo_scalar(*lp, alpha, gamma, beta)
    return float(np.max(np.abs(direct - reduced)))
