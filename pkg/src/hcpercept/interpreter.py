"""Task-guided interpreter: four shared output units behind per-task-type gates."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import PatchTokens, _init_linear

UNITS = ("f", "p", "m", "bbox")

GATE_TABLE = MappingProxyType({
    "seg": frozenset({"m", "p"}),
    "reid": frozenset({"f"}),
    "pose": frozenset({"m", "p"}),
    "peddet": frozenset({"bbox", "p"}),
    "par": frozenset({"p"}),
})


@dataclass
class UnitOutputs:
    f: Optional[torch.Tensor] = None        # [B, N, C]
    p: Optional[torch.Tensor] = None        # [B, N, 1] probabilities
    m: Optional[torch.Tensor] = None        # [B, N, H/4, W/4] logits
    bbox: Optional[torch.Tensor] = None     # [B, N, 4] as (cx, cy, h, w)
    p_logit: Optional[torch.Tensor] = None

    def present(self) -> set:
        return {u for u in UNITS if getattr(self, u) is not None}


def mlp3(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_hidden), nn.ReLU(),
                         nn.Linear(d_hidden, d_out))


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x) - torch.log1p(-x)


def feature_unit(q: torch.Tensor) -> torch.Tensor:
    return q


def global_prob_unit(q: torch.Tensor, linear: nn.Linear) -> tuple:
    logit = linear(q)
    return torch.sigmoid(logit), logit


def bbox_unit(alpha: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Offsets (a_dcx, a_dcy, a_h, a_w) around anchors -> boxes (cx, cy, h, w) in (0, 1)."""
    if not bool(((anchors > 0) & (anchors < 1)).all()):
        raise ValueError("anchor points must lie strictly inside (0, 1) for the inverse sigmoid")
    center = torch.sigmoid(alpha[..., :2] + inverse_sigmoid(anchors))
    return torch.cat([center, torch.sigmoid(alpha[..., 2:])], dim=-1)


class LayerNorm2d(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MapBranch(nn.Module):
    """Upsample encoder tokens 4x with two stride-2 deconvolutions; per-query MLP kernels."""

    def __init__(self, enc_width, width):
        super().__init__()
        self.deconv1 = nn.ConvTranspose2d(enc_width, enc_width, kernel_size=2, stride=2)
        self.norm = LayerNorm2d(enc_width)
        self.deconv2 = nn.ConvTranspose2d(enc_width, width, kernel_size=2, stride=2)
        self.mlp = mlp3(width, width, width)

    def upsample(self, tokens: PatchTokens) -> torch.Tensor:
        x = tokens.tokens.permute(0, 3, 1, 2)
        return self.deconv2(F.gelu(self.norm(self.deconv1(x))))  # [B, C, 4H, 4W]

    def forward(self, q: torch.Tensor, fmap: torch.Tensor) -> torch.Tensor:
        kernel = self.mlp(q)
        return torch.einsum("bnc,bchw->bnhw", kernel, fmap)


def local_map_unit(q: torch.Tensor, tokens: PatchTokens, branch: MapBranch, fmap=None) -> torch.Tensor:
    if fmap is None:
        fmap = branch.upsample(tokens)
    h, w = tokens.grid
    if fmap.shape[-2:] != (4 * h, 4 * w):
        raise ValueError(f"feature map {tuple(fmap.shape[-2:])} does not match 4x token grid {(h, w)}")
    return branch(q, fmap)


class Interpreter(nn.Module):
    def __init__(self, enc_width: int, width: int):
        super().__init__()
        self.add_module("global", nn.Linear(width, 1))
        self.map = MapBranch(enc_width, width)
        self.bbox = nn.Module()
        self.bbox.mlp = mlp3(width, width, 4)
        self.apply(_init_linear)
        # zero-offset start: boxes begin at their anchors
        nn.init.zeros_(self.bbox.mlp[-1].weight)
        nn.init.zeros_(self.bbox.mlp[-1].bias)
        self.calls = Counter()

    @property
    def global_linear(self) -> nn.Linear:
        return getattr(self, "global")

    def forward(self, q_layers: list, tokens: PatchTokens, task_type: str,
                anchors: Optional[torch.Tensor] = None) -> list:
        """Evaluate exactly the gated units for each query state in q_layers."""
        try:
            gates = GATE_TABLE[task_type]
        except KeyError:
            raise ValueError(f"unknown task type {task_type!r}") from None
        fmap = self.map.upsample(tokens) if "m" in gates else None
        outs = []
        for q in q_layers:
            u = UnitOutputs()
            if "f" in gates:
                self.calls["f"] += 1
                u.f = feature_unit(q)
            if "p" in gates:
                self.calls["p"] += 1
                u.p, u.p_logit = global_prob_unit(q, self.global_linear)
            if "m" in gates:
                self.calls["m"] += 1
                u.m = local_map_unit(q, tokens, self.map, fmap)
            if "bbox" in gates:
                self.calls["bbox"] += 1
                u.bbox = bbox_unit(self.bbox.mlp(q), anchors)
            outs.append(u)
        return outs
