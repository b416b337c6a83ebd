"""Task queries and the cross-attention-first transformer decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, DecoderConfig, TaskDescriptor
from .encoder import NumericError, PatchTokens, _init_linear


def init_anchor_points(n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform anchors over the open unit square, shape [n, 2]."""
    if n < 1:
        raise ValueError(f"need at least one anchor, got {n}")
    a = torch.rand(n, 2, generator=generator)
    # torch.rand can return exactly 0
    return a.clamp(1e-6, 1 - 1e-6)


def sine_encode(coords: torch.Tensor, width: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sine-cosine encoding of [..., 2] coordinates into [..., width].

    Each coordinate gets width/2 channels laid out as (sin f0x, cos f0x, sin f1x, cos f1x, ...),
    x channels first, then y.
    """
    nfreq = width // 4
    k = torch.arange(nfreq, dtype=coords.dtype, device=coords.device)
    freqs = 2 * math.pi / temperature ** (2 * k / (width // 2))
    ang = coords.unsqueeze(-1) * freqs  # [..., 2, nfreq]
    enc = torch.stack([ang.sin(), ang.cos()], dim=-1)  # [..., 2, nfreq, 2]
    return enc.flatten(-3)


class CoordProjector(nn.Module):
    """Sine encoding followed by a 2-layer MLP."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, coords):
        return self.fc2(F.relu(self.fc1(sine_encode(coords, self.width))))


def coord_pos_embed(coords: torch.Tensor, proj: CoordProjector) -> torch.Tensor:
    return proj(coords)


def feature_token_coords(h: int, w: int) -> torch.Tensor:
    """Normalized patch centers in row-major order, [h*w, 2] as (x, y)."""
    if h < 1 or w < 1:
        raise ValueError("grid dims must be >= 1")
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


def image_token_coords(tokens: PatchTokens, sizes: Optional[list] = None) -> torch.Tensor:
    """Per-image token centers relative to each original image, [B, H_F*W_F, 2]."""
    B, h, w = tokens.token_valid.shape
    base = feature_token_coords(h, w).to(tokens.tokens.dtype)
    if sizes is None:
        return base.expand(B, -1, -1)
    p = tokens.patch_size
    scale = torch.tensor([[w * p / sw, h * p / sh] for sh, sw in sizes], dtype=base.dtype)
    return (base.unsqueeze(0) * scale.unsqueeze(1)).clamp(0.0, 1.0)


class TaskQueries(nn.Module):
    """Learnable content queries plus either a positional table or anchor points."""

    def __init__(self, task: TaskDescriptor, width: int, own_coord_proj: bool = False,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.task = task
        n = task.num_queries
        self.content = nn.Parameter(torch.randn(n, width, generator=generator) * 0.02)
        if task.task_type == "peddet":
            self.anchors = nn.Parameter(init_anchor_points(n, generator))
            self.pos = None
            self.coord_mlp = CoordProjector(width) if own_coord_proj else None
            if self.coord_mlp is not None:
                self.coord_mlp.apply(_init_linear)
        else:
            self.pos = nn.Parameter(torch.randn(n, width, generator=generator) * 0.02)
            self.anchors = None
            self.coord_mlp = None

    @property
    def is_detection(self) -> bool:
        return self.anchors is not None

    def positional(self, shared_proj: CoordProjector) -> torch.Tensor:
        if self.anchors is None:
            return self.pos
        return coord_pos_embed(self.anchors, self.coord_mlp or shared_proj)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        # a key bias shifts every logit of a query equally, so softmax gives it no gradient
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q, k, v, key_valid=None):
        B, Nq, C = q.shape
        h = self.heads

        def split(x):
            return x.reshape(B, x.shape[1], h, C // h).transpose(1, 2)

        mask = None if key_valid is None else key_valid[:, None, None, :]
        out = F.scaled_dot_product_attention(split(self.q_proj(q)), split(self.k_proj(k)),
                                             split(self.v_proj(v)), attn_mask=mask)
        return self.out_proj(out.transpose(1, 2).reshape(B, Nq, C))


class DecoderBlock(nn.Module):
    """Pre-norm cross-attention -> self-attention -> FFN, each with a residual."""

    def __init__(self, dim, heads, ffn_hidden, prompt_tokens=0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_hidden), nn.ReLU(), nn.Linear(ffn_hidden, dim))
        self.prompt = nn.Parameter(torch.randn(prompt_tokens, dim) * 0.02) if prompt_tokens else None

    def forward(self, x, qpos, mem, mem_pos, mem_valid):
        k, v = mem + mem_pos, mem
        if self.prompt is not None:
            B = x.shape[0]
            pr = self.prompt.unsqueeze(0).expand(B, -1, -1)
            k = torch.cat([k, pr], dim=1)
            v = torch.cat([v, pr], dim=1)
            mem_valid = torch.cat([mem_valid, mem_valid.new_ones(B, pr.shape[1])], dim=1)
        x = x + self.cross_attn(self.norm1(x) + qpos, k, v, mem_valid)
        h = self.norm2(x)
        x = x + self.self_attn(h + qpos, h + qpos, h)
        return x + self.ffn(self.norm3(x))


@dataclass
class DecodedQueries:
    per_layer: list            # L+1 tensors [B, N, C]; entry 0 is the input queries
    token_coords: torch.Tensor  # [B, H_F*W_F, 2]
    anchors: Optional[torch.Tensor] = None
    query_pos: Optional[torch.Tensor] = None


class QueryDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, encoder_width: int):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(encoder_width, cfg.width)
        self.coord_mlp = CoordProjector(cfg.width)
        for i in range(cfg.depth):
            self.add_module(f"block{i}", DecoderBlock(cfg.width, cfg.heads, cfg.ffn_hidden, cfg.prompt_tokens))
        self.apply(_init_linear)

    @property
    def blocks(self) -> list:
        return [getattr(self, f"block{i}") for i in range(self.cfg.depth)]

    def add_prompts(self, n: int, generator: Optional[torch.Generator] = None):
        """Insert n learnable prompt tokens into every block's cross-attention keys/values."""
        for blk in self.blocks:
            p = torch.randn(n, self.cfg.width, generator=generator) * 0.02
            blk.prompt = nn.Parameter(p.to(self.input_proj.weight))

    def forward(self, queries: TaskQueries, tokens: PatchTokens, sizes: Optional[list] = None) -> DecodedQueries:
        C = self.cfg.width
        if queries.content.shape[1] != C:
            raise ConfigError(f"query width {queries.content.shape[1]} != decoder width {C}")
        B, h, w, _ = tokens.tokens.shape
        mem = self.input_proj(tokens.tokens.reshape(B, h * w, -1))
        coords = image_token_coords(tokens, sizes).to(mem.dtype)
        mem_pos = coord_pos_embed(coords, self.coord_mlp)
        mem_valid = tokens.token_valid.reshape(B, h * w)
        qpos = queries.positional(self.coord_mlp).unsqueeze(0).expand(B, -1, -1)
        x = queries.content.unsqueeze(0).expand(B, -1, -1)
        states = [x]
        for i, blk in enumerate(self.blocks):
            x = blk(x, qpos, mem, mem_pos, mem_valid)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after decoder block {i}")
            states.append(x)
        return DecodedQueries(states, coords, queries.anchors, qpos)


def decode(queries: TaskQueries, tokens: PatchTokens, decoder: QueryDecoder, sizes=None) -> DecodedQueries:
    return decoder(queries, tokens, sizes)
