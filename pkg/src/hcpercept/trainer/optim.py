"""Adafactor with first-moment momentum, capped second-moment decay, no parameter scaling.

Update for a parameter x with gradient g at step t (per parameter):

    beta2_t = min(1 - t**-0.8, beta2_cap)
    factored (ndim >= 2, viewed as [rows, cols]):
        R <- beta2_t R + (1 - beta2_t) mean_cols(g^2 + eps1)
        C <- beta2_t C + (1 - beta2_t) mean_rows(g^2 + eps1)
        V = outer(R / mean(R), C)
    otherwise:
        V <- beta2_t V + (1 - beta2_t) (g^2 + eps1)
    u = g / sqrt(V)
    u <- u / max(1, rms(u) / clip_threshold)
    m <- beta1 m + (1 - beta1) u
    x <- x - lr * m - lr * weight_decay * x
"""
from __future__ import annotations

import torch
from torch.optim import Optimizer


class Adafactor(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2_cap=0.999, decay_rate=0.8, eps1=1e-30,
                 clip_threshold=1.0, weight_decay=0.0):
        defaults = dict(lr=lr, beta1=beta1, beta2_cap=beta2_cap, decay_rate=decay_rate, eps1=eps1,
                        clip_threshold=clip_threshold, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                factored = p.ndim >= 2
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    if factored:
                        rows = p.shape[0]
                        cols = p.numel() // rows
                        state["r"] = p.new_zeros(rows)
                        state["c"] = p.new_zeros(cols)
                    else:
                        state["v"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                beta2 = min(1.0 - t ** (-group["decay_rate"]), group["beta2_cap"])
                g2 = g.pow(2) + group["eps1"]
                if factored:
                    g2m = g2.reshape(p.shape[0], -1)
                    r, c = state["r"], state["c"]
                    r.mul_(beta2).add_(g2m.mean(dim=1), alpha=1 - beta2)
                    c.mul_(beta2).add_(g2m.mean(dim=0), alpha=1 - beta2)
                    # separate row/column rsqrt avoids underflow of the outer product
                    u = g.reshape(p.shape[0], -1) * (r / r.mean()).rsqrt()[:, None] * c.rsqrt()[None, :]
                    u = u.reshape(p.shape)
                else:
                    v = state["v"]
                    v.mul_(beta2).add_(g2, alpha=1 - beta2)
                    u = g / v.sqrt()
                rms = u.pow(2).mean().sqrt()
                u = u / torch.clamp(rms / group["clip_threshold"], min=1.0)
                m = state["m"]
                m.mul_(group["beta1"]).add_(u, alpha=1 - group["beta1"])
                lr = group["lr"]
                if group["weight_decay"]:
                    p.mul_(1 - lr * group["weight_decay"])
                p.add_(m, alpha=-lr)
        return loss
