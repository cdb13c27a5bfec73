"""Versioned JSON checkpoints."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .. import jsonio
from ..denoiser import DenoiserModel
from ..numerics import NoiseSchedule, make_schedule
from .optim import AdamState

FORMAT = "smpo-lab-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def model_hash(model: DenoiserModel, sched: NoiseSchedule) -> str:
    """Hash of architecture plus schedule; models are only comparable if equal."""
    key = {"architecture": model.architecture(), "schedule": sched.metadata()}
    return hashlib.sha256(jsonio.dumps(key).encode()).hexdigest()[:16]


def save(path, model: DenoiserModel, sched: NoiseSchedule, config_hash: str = "",
         optimizer: AdamState | None = None, step: int = 0) -> None:
    doc = {"format": FORMAT, "version": VERSION, "step": step,
           "config_hash": config_hash, "model_hash": model_hash(model, sched),
           "schedule": sched.metadata(), "model": model.to_dict(),
           "optimizer": None if optimizer is None else optimizer.to_dict()}
    Path(path).write_text(jsonio.dumps(doc) + "\n")


def load(path) -> tuple[DenoiserModel, NoiseSchedule, dict]:
    doc = jsonio.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    s = doc["schedule"]
    sched = make_schedule(s["T"], s["kind"], s["beta_min"], s["beta_max"])
    model = DenoiserModel.from_dict(doc["model"])
    if model.T != sched.T:
        raise CheckpointError(f"{path}: model horizon {model.T} != schedule T {sched.T}")
    if model_hash(model, sched) != doc["model_hash"]:
        raise CheckpointError(f"{path}: model hash mismatch")
    meta = {"step": doc.get("step", 0), "config_hash": doc.get("config_hash", ""),
            "model_hash": doc["model_hash"],
            "optimizer": None if doc.get("optimizer") is None
            else AdamState.from_dict(doc["optimizer"])}
    return model, sched, meta
