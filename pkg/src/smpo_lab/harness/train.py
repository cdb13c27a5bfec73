"""Reference pretraining and preference fine-tuning loops."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields

import numpy as np

from .. import objectives
from ..denoiser import DenoiserModel, GradientBundle, Tape, backward
from ..diffusion import renoise_invert
from ..numerics import NonFiniteError, SeededRng
from ..preference import MissingLabelError, PreferenceDataset
from . import checkpoint
from .config import ConfigError, DivergenceError, TrainConfig
from .data import pooled_samples
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class MetricsRow:
    step: int
    loss: float
    mean_margin: float
    mean_coefficient: float
    grad_norm: float
    lr: float
    wall_ms: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


class MetricsWriter:
    """Single consumer of ordered metric rows; writes CSV if given a path."""

    def __init__(self, path=None):
        self.rows: list[MetricsRow] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._csv = csv.writer(self._fh)
            self._csv.writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._csv.writerow([repr(v) if isinstance(v, float) else v for v in astuple(row)])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _apply(model: DenoiserModel, grad: GradientBundle, state: AdamState, lr: float,
           config: TrainConfig) -> AdamState:
    return adam_step(model.parameters(), grad.arrays(), state, lr,
                     (config.adam_beta1, config.adam_beta2), config.adam_eps,
                     config.weight_decay)


def _safe_backward(model, graph) -> GradientBundle:
    if not np.isfinite(graph.value):
        raise DivergenceError(f"non-finite loss {graph.value}")
    try:
        return backward(model, graph)
    except NonFiniteError as exc:
        raise DivergenceError(str(exc)) from None


def pretrain_reference(dataset: PreferenceDataset, config: TrainConfig,
                       metrics_path=None, checkpoint_path=None,
                       init_seed: int | None = None) -> DenoiserModel:
    """Fit a conditional noise predictor to every candidate in ``dataset``.

    Conditions are swapped for the null condition with probability
    ``cfg_dropout`` so the same network also serves unguided predictions.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    sched = config.make_schedule()
    x_all, c_all = pooled_samples(dataset)
    model = DenoiserModel(x_all.shape[1], c_all.shape[1], config.T,
                          seed=config.seed if init_seed is None else init_seed,
                          **config.model_kwargs())
    rng = SeededRng(config.seed, (0x9E7,))
    state = AdamState.zeros_like(model.parameters())
    steps = config.pretrain_steps
    with MetricsWriter(metrics_path) as mw:
        for step in range(1, steps + 1):
            tic = time.perf_counter()
            idx = rng.choice(len(x_all), config.pretrain_batch)
            t = rng.integers(1, config.T, size=idx.size)
            eps = rng.normal((idx.size, x_all.shape[1]))
            c = c_all[idx].copy()
            drop = rng.uniform(idx.size) < config.cfg_dropout
            c[drop] = model.null_condition
            graph = objectives.diffusion_loss(model, x_all[idx], c, t, eps, sched)
            grad = _safe_backward(model, graph)
            # warm-up, then cosine decay to a tenth of the peak rate
            warm = min(1.0, step / config.warmup_steps) if config.warmup_steps else 1.0
            decay = 0.55 + 0.45 * np.cos(np.pi * step / steps)
            lr = config.pretrain_lr * warm * decay
            state = _apply(model, grad, state, lr, config)
            mw.write(MetricsRow(step, graph.value, 0.0, 0.0, grad.norm(), lr,
                                0.0 if config.strict else (time.perf_counter() - tic) * 1e3))
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model, sched, config.hash(), step=steps)
    return model


def _micro_batch(model, ref, arrays, idx, t, noise, config: TrainConfig, sched):
    c = arrays["condition"][idx]
    x_w = arrays["x_w"][idx]
    x_l = arrays["x_l"][idx]
    tape = Tape(model)
    if config.method == "sft":
        graph = objectives.diffusion_loss(model, x_w, c, t, noise[0], sched, tape)
        n = len(idx)
        margins, coefs = np.zeros(n), np.zeros(n)
    else:
        pair = {"condition": c, "x_w": x_w, "x_l": x_l,
                "coefficient": arrays["coefficient"][idx]}
        if config.method == "dpo":
            graph = objectives.dpo_loss(model, ref, pair, t, noise[0], noise[1],
                                        config.beta, sched, tape)
        else:
            eps_fn = None
            if not config.detach_inversion:
                eps_fn = lambda x, tt: tape.eps(model, x, tt, c, config.inv_guidance)  # noqa: E731
            inv = [renoise_invert(model, x, t, config.inv_steps, c, config.inv_guidance,
                                  sched, config.renoise_iters, eps_fn=eps_fn)
                   for x in (x_w, x_l)]
            graph = objectives.smpo_loss(model, ref, pair, t, inv[0], inv[1],
                                         config.beta, sched, tape)
        margins = graph.breakdown.margin
        coefs = graph.breakdown.coefficient
    grad = _safe_backward(model, graph)
    return grad, margins, coefs


def finetune(ref: DenoiserModel, dataset: PreferenceDataset, config: TrainConfig,
             metrics_path=None, checkpoint_path=None, sched=None) -> DenoiserModel:
    """Preference fine-tuning of a copy of ``ref``; ``ref`` itself is untouched.

    Each optimizer step draws ``batch_pairs * grad_accum`` pairs and one
    timestep per pair up front, then splits them into ``grad_accum``
    micro-batches whose mean gradients are averaged in order.
    """
    if config.method not in ("sft", "dpo", "smpo"):
        raise ConfigError(f"unknown method {config.method!r}")
    if config.method != "sft" and not dataset.labeled:
        raise MissingLabelError(f"{config.method} needs a labeled dataset")
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    sched = sched or config.make_schedule()
    if sched.T != ref.T:
        raise ConfigError(f"reference horizon {ref.T} != schedule T {sched.T}")
    model = ref.copy()
    ref_sum = ref.checksum()
    arrays = dataset.arrays()
    n_data = len(dataset)
    m, k = config.batch_pairs, config.grad_accum
    dim = arrays["x_w"].shape[1]
    rng = SeededRng(config.seed, (0xF1E,))
    state = AdamState.zeros_like(model.parameters())
    pool = None
    if config.workers > 1 and not config.strict:
        pool = ThreadPoolExecutor(config.workers)
    try:
        with MetricsWriter(metrics_path) as mw:
            for step in range(1, config.total_steps + 1):
                tic = time.perf_counter()
                idx = rng.choice(n_data, m * k)
                t = rng.integers(1, config.T, size=m * k)
                noise = rng.normal((2, m * k, dim))
                jobs = [(idx[j * m:(j + 1) * m], t[j * m:(j + 1) * m],
                         noise[:, j * m:(j + 1) * m]) for j in range(k)]
                run = lambda job: _micro_batch(model, ref, arrays, *job, config, sched)  # noqa: E731
                results = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
                grad = results[0][0]
                for r in results[1:]:
                    grad = grad + r[0]
                grad = grad.scaled(1.0 / k)
                lr = config.lr_at(step)
                state = _apply(model, grad, state, lr, config)
                margins = np.concatenate([r[1] for r in results])
                coefs = np.concatenate([r[2] for r in results])
                mw.write(MetricsRow(step, grad.loss, float(np.mean(margins)),
                                    float(np.mean(coefs)), grad.norm(), lr,
                                    0.0 if config.strict
                                    else (time.perf_counter() - tic) * 1e3))
                if (checkpoint_path is not None and config.checkpoint_every
                        and step % config.checkpoint_every == 0):
                    checkpoint.save(checkpoint_path, model, sched, config.hash(), state, step)
    finally:
        if pool is not None:
            pool.shutdown()
    if ref.checksum() != ref_sum:
        raise RuntimeError("reference model was modified during fine-tuning")
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model, sched, config.hash(), state,
                        config.total_steps)
    return model


def accumulated_gradient(model, ref, dataset: PreferenceDataset, config: TrainConfig,
                         idx, t, noise, sched=None) -> GradientBundle:
    """Gradient of one optimizer step for fixed draws, split per ``config.grad_accum``.

    Exposed so that accumulation can be compared against a single large batch.
    """
    sched = sched or config.make_schedule()
    arrays = dataset.arrays()
    m = len(idx) // config.grad_accum
    grads = [_micro_batch(model, ref, arrays, idx[j * m:(j + 1) * m], t[j * m:(j + 1) * m],
                          noise[:, j * m:(j + 1) * m], config, sched)[0]
             for j in range(config.grad_accum)]
    total = grads[0]
    for g in grads[1:]:
        total = total + g
    return total.scaled(1.0 / config.grad_accum)
