"""Joint multi-dataset training: one optimizer update per step over every scheduled dataset."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..encoder import NumericError
from ..objectives import DetTarget, LossWeights, auxiliary_apply
from .data import collate, positive_ratio
from .model import HCPModel, apply_trainable, resolve_trainable
from .optim import Adafactor
from .plan import TrainPlan, compute_loss_weights, layer_decay_scale, lr_at

DEEP_PROMPT_TOKENS = 14


class TrainingDivergedError(NumericError):
    def __init__(self, step: int, losses: dict):
        self.step = step
        self.losses = losses
        dump = ", ".join(f"{k}={v!r}" for k, v in losses.items())
        super().__init__(f"non-finite loss at step {step}: {dump}")


@dataclass
class DatasetSource:
    """Training samples of one dataset plus the statistics its targets need."""

    name: str
    task_id: str
    samples: list
    num_classes: Optional[int] = None
    pos_ratio: Optional[np.ndarray] = None

    @property
    def task_type(self) -> str:
        return self.samples[0].task_type


def no_weight_decay(name: str, p: torch.Tensor) -> bool:
    """Biases, norm scales, positional tables, queries, anchors and prompt tokens are not decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return p.ndim < 2 or leaf in ("pos_embed", "content", "pos", "anchors", "prompt")


def build_param_groups(named_params, plan: TrainPlan, encoder_depth: int) -> list:
    groups = {}
    for name, p in named_params:
        if not p.requires_grad:
            continue
        scale = layer_decay_scale(name, plan, encoder_depth)
        wd = 0.0 if no_weight_decay(name, p) else plan.weight_decay
        key = (scale, wd)
        if key not in groups:
            groups[key] = {"params": [], "names": [], "lr_scale": scale, "weight_decay": wd}
        groups[key]["params"].append(p)
        groups[key]["names"].append(name)
    return list(groups.values())


class Trainer:
    """Holds the model, auxiliary ReID classifiers, optimizer, data samplers and step counter."""

    def __init__(self, model: HCPModel, plan: TrainPlan, sources: list, loss_weights: Optional[LossWeights] = None,
                 log_path: Optional[Path] = None, prompt_task_ids: Optional[list] = None):
        self.model = model
        self.plan = plan
        self.sources = {s.name: s for s in sources}
        by_name = {d.name: d for d in plan.datasets}
        missing = set(self.sources) ^ set(by_name)
        if missing:
            raise ValueError(f"datasets and plan disagree on {sorted(missing)}")
        for s in sources:
            if s.task_id not in model.tasks:
                raise ValueError(f"dataset {s.name!r} references unknown task {s.task_id!r}")
            if s.task_type == "par" and s.pos_ratio is None:
                s.pos_ratio = positive_ratio(s.samples)
        self.loss_w = loss_weights or LossWeights()
        self.dataset_w = compute_loss_weights(plan)
        self.step = 0
        self.log_path = Path(log_path) if log_path is not None else None
        torch.manual_seed(plan.seed)
        self.rng = np.random.default_rng(plan.seed)
        self._orders = {}

        # ID classifiers for ReID tasks live beside the model, not inside it
        self.aux = nn.ModuleDict()
        for s in sources:
            if s.task_type == "reid" and s.task_id not in self.aux:
                q = model.queries[s.task_id].content
                n_ids = max(int(x.gt["identity"]) for x in s.samples) + 1
                head = nn.Linear(q.numel(), n_ids, bias=False)
                nn.init.normal_(head.weight, std=0.01)
                self.aux[s.task_id] = head

        if plan.mask_mode == "prompt_deep":
            for tid in prompt_task_ids or list(model.tasks):
                dec = model.decoder_for(tid)
                if dec.blocks and dec.blocks[0].prompt is None:
                    dec.add_prompts(DEEP_PROMPT_TOKENS)
        self.trainable = resolve_trainable(model, plan.mask_mode, prompt_task_ids)
        apply_trainable(model, self.trainable)
        named = list(model.named_parameters()) + [(f"aux.{n}", p) for n, p in self.aux.named_parameters()]
        self.groups = build_param_groups(named, plan, model.cfg.encoder.depth)
        self.optimizer = Adafactor([{k: v for k, v in g.items() if k != "names"} for g in self.groups],
                                   lr=plan.peak_lr, beta1=plan.beta1, beta2_cap=plan.beta2_cap)

    # ---------------------------------------------------------------- data

    def _next_indices(self, name: str, k: int) -> list:
        """Draw k indices without replacement within an epoch; reshuffle per epoch."""
        n = len(self.sources[name].samples)
        order, pos = self._orders.get(name, (None, n))
        out = []
        while len(out) < k:
            if pos >= n:
                order, pos = self.rng.permutation(n), 0
            take = min(k - len(out), n - pos)
            out.extend(int(i) for i in order[pos:pos + take])
            pos += take
        self._orders[name] = (order, pos)
        return out

    def sample_batches(self) -> dict:
        out = {}
        for d in self.plan.datasets:
            src = self.sources[d.name]
            idx = self._next_indices(d.name, d.batch_size)
            out[d.name] = [src.samples[i] for i in idx]
        return out

    # ---------------------------------------------------------------- step

    def _dataset_loss(self, src: DatasetSource, samples: list, num_gt: Optional[int] = None):
        patch = self.model.cfg.encoder.patch_size
        batch = collate(samples, patch, src.num_classes, src.pos_ratio)
        if num_gt is not None:
            batch.target = DetTarget(batch.target.boxes, num_gt)
        res = self.model(src.task_id, batch.images)
        head = self.aux[src.task_id] if src.task_type == "reid" else None
        return auxiliary_apply(src.task_type, res.units, batch.target, self.loss_w, head)

    def train_step(self, batches: Optional[dict] = None) -> dict:
        """One update: forward/backward every dataset (detection over micro-batches), then step."""
        if self.step >= self.plan.total_steps:
            raise ValueError(f"plan has only {self.plan.total_steps} steps")
        batches = self.sample_batches() if batches is None else batches
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        record = {}
        for d in self.plan.datasets:
            src = self.sources[d.name]
            samples = batches[d.name]
            w = self.dataset_w[d.name]
            if src.task_type == "peddet" and self.plan.det_micro_batches > 1:
                num_gt = sum(len(np.asarray(s.gt["boxes"]).reshape(-1, 4)) for s in samples)
                chunks = [c for c in np.array_split(np.arange(len(samples)), self.plan.det_micro_batches) if len(c)]
                total, terms = 0.0, {}
                for c in chunks:
                    tl = self._dataset_loss(src, [samples[i] for i in c], num_gt)
                    self._backward(w * tl.total, d.name, record, float(tl.total.detach()))
                    total += float(tl.total.detach())
                    terms = tl.terms
                record[d.name] = {"loss": total, **_floats(terms)}
            else:
                tl = self._dataset_loss(src, samples)
                self._backward(w * tl.total, d.name, record, float(tl.total.detach()))
                record[d.name] = {"loss": float(tl.total.detach()), **_floats(tl.terms)}
        total = math.fsum(self.dataset_w[k] * v["loss"] for k, v in record.items())
        if not math.isfinite(total):
            self.optimizer.zero_grad(set_to_none=True)
            raise TrainingDivergedError(self.step + 1, {k: v["loss"] for k, v in record.items()})
        grads = [p.grad.detach().flatten() for g in self.optimizer.param_groups for p in g["params"]
                 if p.grad is not None]
        grad_norm = float(torch.cat(grads).norm()) if grads else 0.0
        lr = lr_at(self.step + 1, self.plan)
        for g in self.optimizer.param_groups:
            g["lr"] = lr * g["lr_scale"]
        self.optimizer.step()
        self.model.project_anchors()
        self.step += 1
        out = {"step": self.step, "lr": lr, "loss": total, "grad_norm": grad_norm, "datasets": record}
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(out) + "\n")
        return out

    def _backward(self, loss, name, record, value):
        if not math.isfinite(value):
            self.optimizer.zero_grad(set_to_none=True)
            dump = {k: v["loss"] for k, v in record.items()}
            dump[name] = value
            raise TrainingDivergedError(self.step + 1, dump)
        # datasets whose task is fully frozen still report a loss but send no gradient
        if loss.requires_grad:
            loss.backward()

    def fit(self, steps: int, callback=None) -> list:
        history = []
        for _ in range(steps):
            rec = self.train_step()
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history


def _floats(terms: dict) -> dict:
    return {k: float(v) for k, v in terms.items()}
