"""Small transformer building blocks shared by the neural models."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, ctx_width: int | None = None):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        ctx_width = ctx_width or width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(ctx_width, width)
        self.v = nn.Linear(ctx_width, width)
        self.o = nn.Linear(width, width)

    def forward(self, x, ctx=None, allowed=None):
        """``allowed`` broadcasts to (B, Lq, Lk); False entries get no weight."""
        ctx = x if ctx is None else ctx
        B, Lq, W = x.shape
        Lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(B, Lq, h, W // h).transpose(1, 2)
        k = self.k(ctx).view(B, Lk, h, W // h).transpose(1, 2)
        v = self.v(ctx).view(B, Lk, h, W // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(W // h)
        if allowed is not None:
            scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, Lq, W)
        return self.o(out)


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden or 4 * width)
        self.fc2 = nn.Linear(hidden or 4 * width, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm residual block: self-attention, optional cross-attention, MLP."""

    def __init__(self, width: int, heads: int, ctx_width: int | None = None):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.cross = None
        if ctx_width is not None:
            self.ln_c = nn.LayerNorm(width)
            self.cross = Attention(width, heads, ctx_width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = MLP(width)

    def forward(self, x, allowed=None, ctx=None, ctx_allowed=None):
        x = x + self.attn(self.ln1(x), allowed=allowed)
        if self.cross is not None:
            x = x + self.cross(self.ln_c(x), ctx, ctx_allowed)
        return x + self.mlp(self.ln2(x))


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def state_arrays(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_arrays(module: nn.Module, arrays: dict) -> None:
    module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
