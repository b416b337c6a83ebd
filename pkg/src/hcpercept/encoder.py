"""Plain ViT encoder with a shared, spatially interpolated positional table."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, EncoderConfig


class NumericError(RuntimeError):
    """Non-finite values appeared in a forward pass."""


@dataclass
class ImageBatch:
    """Padded pixels [B, H, W, 3] with a validity mask [B, H, W]."""

    pixels: torch.Tensor
    pad_mask: torch.Tensor
    sizes: list

    @classmethod
    def from_images(cls, images: Sequence, patch_size: int) -> "ImageBatch":
        """Stack HxWx3 float arrays, zero-padding each up to a common patch-aligned size."""
        if not len(images):
            raise ValueError("empty image list")
        arrs = [torch.as_tensor(np.asarray(im), dtype=torch.float32) for im in images]
        H = max(a.shape[0] for a in arrs)
        W = max(a.shape[1] for a in arrs)
        H = int(math.ceil(H / patch_size) * patch_size)
        W = int(math.ceil(W / patch_size) * patch_size)
        pixels = torch.zeros(len(arrs), H, W, 3)
        mask = torch.zeros(len(arrs), H, W, dtype=torch.bool)
        for i, a in enumerate(arrs):
            h, w = a.shape[:2]
            pixels[i, :h, :w] = a
            mask[i, :h, :w] = True
        return cls(pixels, mask, [tuple(a.shape[:2]) for a in arrs])

    def to(self, dtype=None) -> "ImageBatch":
        return ImageBatch(self.pixels.to(dtype=dtype), self.pad_mask, list(self.sizes))

    def __len__(self):
        return self.pixels.shape[0]


@dataclass
class PatchTokens:
    tokens: torch.Tensor       # [B, H_F, W_F, C_e]
    token_valid: torch.Tensor  # [B, H_F, W_F]
    patch_size: int

    @property
    def grid(self) -> tuple:
        return tuple(self.tokens.shape[1:3])

    def valid_extent(self) -> torch.Tensor:
        """Per-image count of valid token rows and columns, [B, 2] as (rows, cols)."""
        rows = self.token_valid.any(dim=2).sum(dim=1)
        cols = self.token_valid.any(dim=1).sum(dim=1)
        return torch.stack([rows, cols], dim=1)


def token_valid_mask(pad_mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """A token is valid iff any pixel it covers is valid."""
    B, H, W = pad_mask.shape
    if H % patch_size or W % patch_size:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch_size}")
    m = pad_mask.reshape(B, H // patch_size, patch_size, W // patch_size, patch_size)
    return m.any(dim=4).any(dim=2)


def interpolate_pos_embed(source: torch.Tensor, target: tuple, mode: str = "bilinear") -> torch.Tensor:
    """Resample a [G, G, C] positional table to [H_F, W_F, C] with corner-aligned sampling."""
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"target grid must be positive, got {target}")
    if (h, w) == tuple(source.shape[:2]):
        return source
    x = source.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(x, size=(h, w), mode=mode, align_corners=True)
    return out[0].permute(1, 2, 0)


class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual branch."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3, bias=False)
        # no key bias: it shifts all logits of a query equally and never receives a gradient
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_valid=None):
        B, T, C = x.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(x, self.qkv.weight, bias).reshape(B, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        mask = None if key_valid is None else key_valid[:, None, None, :]
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2], attn_mask=mask)
        return self.proj(out.transpose(1, 2).reshape(B, T, C))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, ffn_hidden, drop_path):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, ffn_hidden), nn.GELU(), nn.Linear(ffn_hidden, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, key_valid=None):
        x = x + self.drop_path(self.attn(self.norm1(x), key_valid))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.width
        self.patch_proj = nn.Conv2d(3, C, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.pos_grid, cfg.pos_grid, C))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for i in range(cfg.depth):
            self.add_module(f"block{i}", EncoderBlock(C, cfg.heads, cfg.ffn_hidden, cfg.drop_path_rate))
        self.norm = nn.LayerNorm(C, eps=1e-6)
        self.apply(_init_linear)

    @property
    def blocks(self) -> list:
        return [getattr(self, f"block{i}") for i in range(self.cfg.depth)]

    def patchify(self, batch: ImageBatch) -> PatchTokens:
        """Project non-overlapping patches; padded pixels are zeroed first."""
        p = self.cfg.patch_size
        valid = token_valid_mask(batch.pad_mask, p)
        x = batch.pixels * batch.pad_mask.unsqueeze(-1).to(batch.pixels.dtype)
        x = self.patch_proj(x.permute(0, 3, 1, 2).to(self.pos_embed.dtype))
        return PatchTokens(x.permute(0, 2, 3, 1), valid, p)

    def forward(self, batch: ImageBatch) -> PatchTokens:
        pt = self.patchify(batch)
        B, Hf, Wf, C = pt.tokens.shape
        if Hf > self.cfg.pos_grid or Wf > self.cfg.pos_grid:
            raise ConfigError(f"token grid {Hf}x{Wf} exceeds positional table {self.cfg.pos_grid}")
        pos = interpolate_pos_embed(self.pos_embed, (Hf, Wf), self.cfg.pos_interp)
        x = (pt.tokens + pos).reshape(B, Hf * Wf, C)
        key_valid = pt.token_valid.reshape(B, Hf * Wf)
        for i, blk in enumerate(self.blocks):
            x = blk(x, key_valid)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder block {i}")
        x = self.norm(x)
        return PatchTokens(x.reshape(B, Hf, Wf, C), pt.token_valid, pt.patch_size)


def _init_linear(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def encode(batch: ImageBatch, encoder: Encoder) -> PatchTokens:
    return encoder(batch)
