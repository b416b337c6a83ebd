"""Model assembly under the weight-sharing modes, plus parameter accounting and trainable masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from ..config import ModelConfig, TaskDescriptor
from ..decoder import DecodedQueries, QueryDecoder, TaskQueries
from ..encoder import Encoder, ImageBatch, PatchTokens
from ..interpreter import Interpreter
from ..objectives import supervised_layers
from .plan import MASK_MODES, SHARING_MODES


@dataclass
class ForwardResult:
    tokens: PatchTokens
    decoded: DecodedQueries
    layers: list     # indices of the decoder states that were interpreted
    units: list      # UnitOutputs per entry of layers


class HCPModel(nn.Module):
    """Shared encoder; decoder/interpreter shared or duplicated per the sharing mode; per-task queries."""

    def __init__(self, cfg: ModelConfig, tasks: list, sharing_mode: str = "baseline",
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if sharing_mode not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {sharing_mode!r}")
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        self.cfg = cfg
        self.tasks = {t.task_id: t for t in tasks}
        self.sharing_mode = sharing_mode
        ce, cd = cfg.encoder.width, cfg.decoder.width

        self.encoder = Encoder(cfg.encoder)
        if sharing_mode in ("baseline", "per_task_interpreter"):
            self.decoder = QueryDecoder(cfg.decoder, ce)
        else:
            keys = self._group_keys(tasks)
            self.decoders = nn.ModuleDict({k: QueryDecoder(cfg.decoder, ce) for k in keys})
        if sharing_mode == "baseline":
            self.interpreter = Interpreter(ce, cd)
        else:
            keys = self._group_keys(tasks)
            self.interpreters = nn.ModuleDict({k: Interpreter(ce, cd) for k in keys})
        own_proj = not cfg.decoder.share_coord_proj
        self.queries = nn.ModuleDict({t.task_id: TaskQueries(t, cd, own_proj, generator) for t in tasks})

    def _group_keys(self, tasks) -> list:
        if self.sharing_mode == "per_task_type":
            return sorted({t.task_type for t in tasks})
        return [t.task_id for t in tasks]

    def _group(self, task_id: str) -> str:
        return self.tasks[task_id].task_type if self.sharing_mode == "per_task_type" else task_id

    def add_task(self, task: TaskDescriptor, generator: Optional[torch.Generator] = None):
        """Attach queries for a new task; only modes whose decoder and interpreter are shared allow this."""
        if task.task_id in self.tasks:
            raise ValueError(f"task {task.task_id!r} already exists")
        self.tasks[task.task_id] = task
        try:
            self.decoder_for(task.task_id)
            self.interpreter_for(task.task_id)
        except KeyError:
            del self.tasks[task.task_id]
            raise ValueError(f"sharing mode {self.sharing_mode!r} has no shared weights for task "
                             f"{task.task_id!r}") from None
        q = TaskQueries(task, self.cfg.decoder.width, not self.cfg.decoder.share_coord_proj, generator)
        self.queries[task.task_id] = q.to(self.encoder.norm.weight.device)

    def decoder_for(self, task_id: str) -> QueryDecoder:
        if hasattr(self, "decoder"):
            return self.decoder
        return self.decoders[self._group(task_id)]

    def interpreter_for(self, task_id: str) -> Interpreter:
        if hasattr(self, "interpreter"):
            return self.interpreter
        return self.interpreters[self._group(task_id)]

    def forward(self, task_id: str, batch: ImageBatch, layers: Optional[list] = None) -> ForwardResult:
        task = self.tasks[task_id]
        tokens = self.encoder(batch)
        decoder = self.decoder_for(task_id)
        decoded = decoder(self.queries[task_id], tokens, batch.sizes)
        if layers is None:
            layers = supervised_layers(task.task_type, decoder.cfg.depth)
        states = [decoded.per_layer[i] for i in layers]
        units = self.interpreter_for(task_id)(states, tokens, task.task_type, decoded.anchors)
        return ForwardResult(tokens, decoded, list(layers), units)

    def predict(self, task_id: str, batch: ImageBatch):
        """Final-layer unit outputs only."""
        depth = self.decoder_for(task_id).cfg.depth
        return self.forward(task_id, batch, layers=[depth]).units[0]

    def project_anchors(self, eps: float = 1e-4):
        """Keep anchor points strictly inside the unit square after an update."""
        with torch.no_grad():
            for q in self.queries.values():
                if q.anchors is not None:
                    q.anchors.clamp_(eps, 1 - eps)


def build_model(cfg: ModelConfig, tasks: list, sharing_mode: str = "baseline", seed: Optional[int] = 0,
                device=None) -> HCPModel:
    """Construct a model. device='meta' allocates no storage (for parameter accounting)."""
    if device == "meta":
        with torch.device("meta"):
            return HCPModel(cfg, tasks, sharing_mode, None)
    gen = None
    if seed is not None:
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
    return HCPModel(cfg, tasks, sharing_mode, gen)


def count(params) -> int:
    return sum(p.numel() for p in params)


def component_counts(model: HCPModel) -> dict:
    enc = count(model.encoder.parameters())
    dec = count(p for n, p in model.named_parameters() if n.startswith(("decoder.", "decoders.")))
    itp = count(p for n, p in model.named_parameters() if n.startswith(("interpreter.", "interpreters.")))
    q = count(model.queries.parameters())
    return {"encoder": enc, "decoder": dec, "interpreter": itp, "queries": q, "total": enc + dec + itp + q}


def param_share_report(model: HCPModel) -> dict:
    total = count(model.parameters())
    q = count(model.queries.parameters())
    return {"total": total, "task_agnostic": total - q, "ratio": (total - q) / total if total else 1.0}


def resolve_trainable(model: HCPModel, mode: str, task_ids: Optional[list] = None) -> set:
    """Names of parameters left trainable under a mask mode.

    prompt_queries: the tasks' content queries and their positional embeddings (or anchors).
    prompt_deep: additionally the decoder prompt tokens and decoder LayerNorm weights/biases.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    names = [n for n, _ in model.named_parameters()]
    if mode == "full":
        return set(names)
    tids = list(model.tasks) if task_ids is None else task_ids
    prefixes = tuple(f"queries.{t}." for t in tids)
    keep = {n for n in names if n.startswith(prefixes) and n.rsplit(".", 1)[-1] in ("content", "pos", "anchors")}
    if mode == "prompt_deep":
        norms = {f"{n}.{k}" for n, m in model.named_modules()
                 if n.startswith(("decoder.", "decoders.")) and isinstance(m, nn.LayerNorm) for k in ("weight", "bias")}
        keep |= {n for n in names if n.endswith(".prompt") or n in norms}
    return keep


def apply_trainable(model: HCPModel, names: set):
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)


def trainable_mask_report(model: HCPModel, names: set) -> dict:
    params = dict(model.named_parameters())
    learnable = count(params[n] for n in names)
    total = count(params.values())
    return {"learnable": learnable, "total": total, "ratio": learnable / total}
