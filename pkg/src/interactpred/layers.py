"""Transformer building blocks shared by encoder, decoder and adaptation heads."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine embedding, one row per raster-order patch."""
    if dim % 4:
        raise ValueError("sincos_2d needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    rows, cols = torch.meshgrid(torch.arange(grid, dtype=torch.float64),
                                torch.arange(grid, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (rows.flatten(), cols.flatten()):
        ang = coord[:, None] * omega[None, :]
        parts += [ang.sin(), ang.cos()]
    return torch.cat(parts, dim=1).float()


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``key_mask`` is boolean (B, Lk) with True marking keys that may be attended.
    Projection biases start at zero.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        for lin in (self.q, self.k, self.v, self.out):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context, key_mask=None, key_context=None):
        # key_context: keys computed from a different input than values (e.g. context + positions)
        keys = context if key_context is None else key_context
        q, k, v = self._split(self.q(query)), self._split(self.k(keys)), self._split(self.v(context))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class PreNormBlock(nn.Module):
    """ViT encoder block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class AttentionPool(nn.Module):
    """Multihead attention pooling of a token sequence into one vector.

    z <- LN(z + Attn(z, tokens)); z <- LN(z + MLP(z)). The latent ``z`` is
    supplied by the caller so one block can serve several latents.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, latent, tokens, mask=None):
        # latent: (B, d) or (d,)
        if mask is not None and not bool(mask.any(dim=-1).all()):
            raise ValueError("attention pooling over a fully masked sequence")
        if latent.dim() == 1:
            latent = latent.expand(tokens.shape[0], -1)
        z = latent.unsqueeze(1)
        z = self.norm1(z + self.attn(z, tokens, mask))
        z = self.norm2(z + self.mlp(z))
        return z.squeeze(1)


class MLP(nn.Module):
    """Plain multi-layer perceptron with GELU between layers."""

    def __init__(self, widths):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x
