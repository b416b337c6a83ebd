"""Checkpoint container: named tensors plus a metadata header with a format version."""
from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..config import ModelConfig, TaskDescriptor
from .model import HCPModel, build_model

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict
    model: dict              # config, tasks, sharing mode
    plan: dict = field(default_factory=dict)
    step: int = 0
    rng: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    version: int = FORMAT_VERSION


def model_header(model: HCPModel) -> dict:
    tasks = []
    for t in model.tasks.values():
        d = asdict(t)
        d["class_names"] = list(t.class_names) if t.class_names is not None else None
        tasks.append(d)
    return {"config": model.cfg.to_dict(), "tasks": tasks, "sharing_mode": model.sharing_mode}


def snapshot(model: HCPModel, plan: Optional[dict] = None, step: int = 0, trainer=None) -> Checkpoint:
    ck = Checkpoint(params={k: v.detach().clone() for k, v in model.state_dict().items()},
                    model=model_header(model), plan=dict(plan or {}), step=step)
    if trainer is not None:
        ck.plan = trainer.plan.to_dict()
        ck.step = trainer.step
        ck.aux = {k: v.detach().clone() for k, v in trainer.aux.state_dict().items()}
        ck.optimizer = trainer.optimizer.state_dict()
        ck.rng = {"torch": torch.get_rng_state(), "numpy": trainer.rng.bit_generator.state,
                  "orders": {k: (None if o is None else [int(i) for i in o], int(p))
                             for k, (o, p) in trainer._orders.items()}}
    return ck


def save_checkpoint(path, ck: Checkpoint):
    """Write to a temporary file in the target directory, then atomically rename over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(asdict(ck), f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        d = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} is corrupt or unreadable: {e}") from None
    if not isinstance(d, dict) or "version" not in d:
        raise CheckpointError(f"checkpoint {path} has no format header")
    if d["version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {d['version']}, expected {FORMAT_VERSION}")
    missing = {"params", "model"} - set(d)
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {sorted(missing)}")
    return Checkpoint(**d)


def restore_model(ck: Checkpoint) -> HCPModel:
    cfg = ModelConfig.from_dict(ck.model["config"])
    tasks = [TaskDescriptor(t["task_id"], t["task_type"], t["num_queries"],
                            tuple(t["class_names"]) if t["class_names"] is not None else None)
             for t in ck.model["tasks"]]
    model = build_model(cfg, tasks, ck.model["sharing_mode"], seed=None)
    decoders = {"decoder": model.decoder} if hasattr(model, "decoder") else \
        {f"decoders.{k}": d for k, d in model.decoders.items()}
    for prefix, dec in decoders.items():
        key = f"{prefix}.block0.prompt"
        if key in ck.params:
            dec.add_prompts(ck.params[key].shape[0])
    try:
        model.load_state_dict(ck.params)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint parameters do not fit the stored model: {e}") from None
    return model


def restore_trainer_state(trainer, ck: Checkpoint):
    """Continue a run: step counter, optimizer moments, auxiliary heads and rng streams."""
    trainer.step = ck.step
    if ck.aux:
        trainer.aux.load_state_dict(ck.aux)
    if ck.optimizer is not None:
        trainer.optimizer.load_state_dict(ck.optimizer)
    if ck.rng:
        torch.set_rng_state(ck.rng["torch"])
        trainer.rng.bit_generator.state = ck.rng["numpy"]
        trainer._orders = {k: (None if o is None else np.array(o), p) for k, (o, p) in ck.rng["orders"].items()}
