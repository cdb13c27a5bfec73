"""Command-line entry point: ``smpo-lab <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import jsonio
from ..diffusion import ddim_sample, reconstruct, renoise_invert
from ..numerics import InvalidRangeError, NonFiniteError, SeededRng
from ..preference import (DegenerateStatsError, MissingLabelError, RewardFunction,
                          label_dataset, read_jsonl, write_jsonl)
from . import checkpoint, checks
from .config import ConfigError, DivergenceError, TrainConfig, build_config, read_config_file
from .data import dataset_conditions, gen_toy_data
from .evaluate import evaluate
from .train import finetune, pretrain_reference

log = logging.getLogger("smpo_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 2, 3, 1

CONFIG_FLAGS = {
    "method": str, "beta": float, "gamma": float, "inv_steps": int,
    "inv_guidance": float, "renoise_iters": int, "T": int, "sample_steps": int,
    "lr": float, "warmup_steps": int, "batch_pairs": int, "grad_accum": int,
    "total_steps": int, "seed": int, "hidden_dim": int, "depth": int,
    "activation": str, "pretrain_steps": int, "pretrain_batch": int,
    "pretrain_lr": float, "checkpoint_every": int, "workers": int,
    "weight_decay": float, "schedule": str, "beta_min": float, "beta_max": float,
}
BOOL_FLAGS = ("detach_inversion", "lr_beta_scaling", "strict")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    for name, kind in CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    for name in BOOL_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name,
                       action=argparse.BooleanOptionalAction, default=None)


def _config(args) -> TrainConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    keys = list(CONFIG_FLAGS) + list(BOOL_FLAGS)
    return build_config(file_values, {k: getattr(args, k, None) for k in keys})


def _reward(args) -> RewardFunction:
    if args.reward == "axis_projection":
        return RewardFunction("axis_projection", axis=(1.0, 1.0))
    return RewardFunction(args.reward)


def cmd_gen_data(args) -> int:
    ds = gen_toy_data(args.kind, args.n_pairs, args.seed)
    write_jsonl(ds, args.out)
    log.info("wrote %d pairs to %s", len(ds), args.out)
    return EXIT_OK


def cmd_label(args) -> int:
    ds = label_dataset(read_jsonl(args.data), _reward(args), args.gamma)
    write_jsonl(ds, args.out)
    st = ds.reward_stats
    log.info("labeled %d pairs (reward max %.4g, min %.4g)", len(ds), st.max, st.min)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pretrain_reference(read_jsonl(args.data), cfg, args.metrics, args.out)
    log.info("reference checkpoint written to %s", args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ref, sched, _ = checkpoint.load(args.ref)
    if sched.T != cfg.T:
        raise ConfigError(f"reference checkpoint has T={sched.T}, config has T={cfg.T}")
    finetune(ref, read_jsonl(args.data), cfg, args.metrics, args.out, sched=sched)
    log.info("fine-tuned checkpoint written to %s", args.out)
    return EXIT_OK


def _conditions(args, model) -> np.ndarray:
    if args.data:
        return dataset_conditions(read_jsonl(args.data))
    from .data import toy_conditions
    return toy_conditions(args.kind)


def cmd_sample(args) -> int:
    model, sched, _ = checkpoint.load(args.ckpt)
    conds = _conditions(args, model)
    rng = SeededRng(args.seed, (0x5A,))
    pick = rng.integers(0, len(conds) - 1, size=args.n)
    c = conds[pick]
    xs = ddim_sample(model, rng.normal((args.n, model.data_dim)), c, args.steps,
                     args.guidance, sched)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"c{j}" for j in range(c.shape[1])]
                   + [f"x{j}" for j in range(xs.shape[1])])
        for i in range(args.n):
            w.writerow([i, *map(repr, c[i].tolist()), *map(repr, xs[i].tolist())])
    return EXIT_OK


def cmd_invert(args) -> int:
    model, sched, _ = checkpoint.load(args.ckpt)
    ds = read_jsonl(args.data)
    pairs = ds.pairs[:args.limit] if args.limit else ds.pairs
    x0 = np.stack([p.x_w for p in pairs])
    c = np.stack([p.condition for p in pairs])
    if args.t:
        t = np.full(len(pairs), args.t)
    else:
        t = SeededRng(args.seed, (0x17,)).integers(1, sched.T, size=len(pairs))
    inv = renoise_invert(model, x0, t, args.inv_steps, c, args.inv_guidance, sched,
                         args.renoise_iters)
    rec = reconstruct(model, inv.x_tilde, t, args.inv_steps, c, args.inv_guidance, sched)
    err = np.linalg.norm(rec - x0, axis=1)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t", "inv_steps", "residual_before", "residual_after", "recon_error"])
        for i, p in enumerate(pairs):
            w.writerow([p.id, int(t[i]), args.inv_steps, repr(float(inv.residual_before[i])),
                        repr(float(inv.residual_after[i])), repr(float(err[i]))])
    return EXIT_OK


def cmd_eval(args) -> int:
    model, sched, meta_m = checkpoint.load(args.model)
    ref, sched_r, meta_r = checkpoint.load(args.ref)
    if meta_m["model_hash"] != meta_r["model_hash"]:
        raise ConfigError("model and reference differ in architecture or schedule")
    rep = evaluate(model, ref, _reward(args), args.n_prompts, args.sample_steps,
                   args.seed, _conditions(args, model), sched, args.guidance)
    text = jsonio.dumps(rep.to_dict())
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for objective in ("diffusion", "dpo", "smpo"):
        errs = [checks.gradcheck(objective, args.seed + i, h=args.h) for i in range(args.configs)]
        worst = max(worst, max(errs))
        print(f"{objective:10s} max_rel_err={max(errs):.3e} over {args.configs} configs")
    ok = worst < args.tol
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_identity_check(args) -> int:
    tic = time.perf_counter()
    err = checks.identity_sweep(args.n, args.seed)
    ok = err < args.tol
    print(f"max|direct-reduced|={err:.3e} n={args.n} "
          f"elapsed={time.perf_counter() - tic:.3f}s {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smpo-lab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate unlabeled toy pairs")
    p.add_argument("--kind", choices=["gmm2d", "ring"], default="gmm2d")
    p.add_argument("--n-pairs", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("label", help="score pairs and attach smoothed labels")
    p.add_argument("--data", required=True)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--reward", choices=["target_distance", "axis_projection"],
                   default="target_distance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("pretrain", help="train the reference denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="preference fine-tuning (dpo, smpo or sft)")
    p.add_argument("--data", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw DDIM samples to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--kind", choices=["gmm2d", "ring"], default="gmm2d")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert", help="ReNoise inversion diagnostics per sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t", type=int, default=0, help="fixed step; 0 draws one per sample")
    p.add_argument("--inv-steps", type=int, default=9)
    p.add_argument("--inv-guidance", type=float, default=1.0)
    p.add_argument("--renoise-iters", type=int, default=1)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="win rate of a model against the reference")
    p.add_argument("--model", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--n-prompts", type=int, default=2000)
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reward", choices=["target_distance", "axis_projection"],
                   default="target_distance")
    p.add_argument("--data")
    p.add_argument("--kind", choices=["gmm2d", "ring"], default="gmm2d")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="tape gradients vs central differences")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("identity-check", help="smoothed-DPO direct vs reduced form sweep")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_identity_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidRangeError, MissingLabelError, DegenerateStatsError,
            checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
