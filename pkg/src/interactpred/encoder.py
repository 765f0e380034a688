"""Dual-frame visual encoder, deformable causality merge and shared token aggregator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import ConfigError, ModelConfig
from .layers import AttentionPool, PreNormBlock, sincos_2d
from .text import FrozenTextEncoder, Vocabulary


def patchify(images: torch.Tensor, s: int) -> torch.Tensor:
    """(..., 3, H, W) -> (..., H*W/s^2, 3*s*s), raster order of s x s windows."""
    *lead, c, h, w = images.shape
    if h % s or w % s:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {s}")
    gh, gw = h // s, w // s
    x = images.reshape(*lead, c, gh, s, gw, s)
    n = len(lead)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, gh * gw, c * s * s)


def unpatchify(patches: torch.Tensor, s: int, channels: int = 3) -> torch.Tensor:
    """Exact inverse of :func:`patchify` for square images."""
    *lead, n_patches, _ = patches.shape
    g = math.isqrt(n_patches)
    if g * g != n_patches:
        raise ValueError(f"{n_patches} patches do not form a square grid")
    x = patches.reshape(*lead, g, g, channels, s, s)
    n = len(lead)
    x = x.permute(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, channels, g * s, g * s)


def bilinear_gather(values: torch.Tensor, loc: torch.Tensor, grid: int) -> torch.Tensor:
    """Bilinearly sample a square token grid at continuous locations.

    values: (B, H, grid*grid, c) in raster order.
    loc: (B, H, Q, 2) as (x, y) in cell units, cell centers at integers.
    Locations are clamped to the grid border. Returns (B, H, Q, c).
    """
    x = loc[..., 0].clamp(0, grid - 1)
    y = loc[..., 1].clamp(0, grid - 1)
    x0f, y0f = torch.floor(x).detach(), torch.floor(y).detach()
    wx, wy = x - x0f, y - y0f
    x0, y0 = x0f.long(), y0f.long()
    x1, y1 = (x0 + 1).clamp(max=grid - 1), (y0 + 1).clamp(max=grid - 1)
    c = values.shape[-1]

    def gather(yi, xi):
        idx = (yi * grid + xi).unsqueeze(-1).expand(*yi.shape, c)
        return torch.gather(values, 2, idx)

    wx, wy = wx.unsqueeze(-1), wy.unsqueeze(-1)
    return ((1 - wx) * (1 - wy) * gather(y0, x0) + wx * (1 - wy) * gather(y0, x1)
            + (1 - wx) * wy * gather(y1, x0) + wx * wy * gather(y1, x1))


class DeformableMerge(nn.Module):
    """Single-scale deformable attention from initial-state queries to the second state.

    Each query token samples ``points`` locations per head around its own patch
    center on the second frame's grid, weights them with a softmax predicted
    from the query, and the result is merged as ``LN(v0 + attended)``.
    """

    def __init__(self, dim: int, grid: int, heads: int = 4, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim={dim} not divisible by deform heads={heads}")
        self.dim, self.grid, self.heads, self.points = dim, grid, heads, points
        self.offsets = nn.Linear(dim, heads * points * 2)
        self.weights = nn.Linear(dim, heads * points)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        rows, cols = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
        self.register_buffer("reference", torch.stack([cols, rows], -1).reshape(-1, 2).float())
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.zeros_(self.offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2 * math.pi / self.heads)
        dirs = torch.stack([theta.cos(), theta.sin()], -1)
        dirs = dirs / dirs.abs().max(-1, keepdim=True).values
        scale = 0.5 * torch.arange(1, self.points + 1, dtype=torch.float32)
        with torch.no_grad():
            self.offsets.bias.copy_((dirs[:, None, :] * scale[None, :, None]).flatten())
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)
        for lin in (self.value, self.out):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def attend(self, query, source):
        b, n, d = query.shape
        if source.shape != query.shape or n != self.grid ** 2:
            raise ValueError(f"deformable merge needs matching ({self.grid ** 2}, {d}) token "
                             f"matrices, got {tuple(query.shape)} and {tuple(source.shape)}")
        h, k = self.heads, self.points
        offsets = self.offsets(query).view(b, n, h, k, 2)
        weights = self.weights(query).view(b, n, h, k).softmax(-1)
        loc = self.reference.to(query.dtype)[None, :, None, None, :] + offsets
        values = self.value(source).view(b, n, h, d // h).transpose(1, 2)
        loc = loc.permute(0, 2, 1, 3, 4).reshape(b, h, n * k, 2)
        sampled = bilinear_gather(values, loc, self.grid).view(b, h, n, k, d // h)
        attended = (sampled * weights.permute(0, 2, 1, 3).unsqueeze(-1)).sum(3)
        return self.out(attended.transpose(1, 2).reshape(b, n, d))

    def forward(self, v0, v1):
        return self.norm(v0 + self.attend(v0, v1))


class TokenAggregator(nn.Module):
    """One attention-pooling block shared across modalities, one zero-initialized latent each."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.pool = AttentionPool(dim, heads, mlp_ratio)
        self.latents = nn.ParameterDict({
            "visual": nn.Parameter(torch.zeros(dim)),
            "language": nn.Parameter(torch.zeros(dim)),
        })

    def forward(self, tokens, mask=None, modality: str = "visual"):
        if tokens.shape[-2] == 0:
            raise ValueError("cannot aggregate an empty token sequence")
        return self.pool(self.latents[modality], tokens, mask)


@dataclass
class EncoderOutput:
    v: torch.Tensor               # (B, L, d) merged visual tokens
    v_agg: torch.Tensor           # (B, d)
    l: torch.Tensor | None = None       # (B, L_lang, d)
    l_agg: torch.Tensor | None = None   # (B, d)
    l_mask: torch.Tensor | None = None  # (B, L_lang) bool


class MultimodalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, causality: str = "deformable"):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.causality = causality
        s, d = cfg.patch_size, cfg.dim
        self.patch_embed = nn.Linear(3 * s * s, d)
        # learned, but started from 2-D sin-cos so position is legible from step 0
        self.pos_embed = nn.Parameter(sincos_2d(cfg.grid_size, d).unsqueeze(0))
        self.blocks = nn.ModuleList(PreNormBlock(d, cfg.encoder_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(d)
        if causality == "deformable":
            self.merge = nn.ModuleList(
                DeformableMerge(d, cfg.grid_size, cfg.deform_heads, cfg.deform_points)
                for _ in range(cfg.causality_depth))
        else:
            self.merge = None
        self.aggregator = TokenAggregator(d, cfg.encoder_heads, cfg.mlp_ratio)
        self.text = FrozenTextEncoder(vocab, cfg.max_text_len, d, cfg.lang_dim)

    def encode_frame(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L_vis, d)."""
        size = self.cfg.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, size, size):
            raise ValueError(f"expected (B, 3, {size}, {size}) images, got {tuple(images.shape)}")
        x = self.patch_embed(patchify(images, self.cfg.patch_size)) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def causality_merge(self, v0, v1):
        if self.merge is None:
            # dual-frame ablation: both token sets are handed on side by side
            return torch.cat([v0, v1], dim=1)
        v = v0
        for layer in self.merge:
            v = layer(v, v1)
        return v

    def encode_text(self, tokens, mask):
        l = self.text(tokens, mask)
        return l, self.aggregator(l, mask, "language")

    def forward(self, frames: torch.Tensor, tokens=None, mask=None) -> EncoderOutput:
        """frames: (B, 2, 3, H, W); tokens/mask: (B, L_lang) or None for vision-only."""
        v0 = self.encode_frame(frames[:, 0])
        v1 = self.encode_frame(frames[:, 1])
        v = self.causality_merge(v0, v1)
        out = EncoderOutput(v=v, v_agg=self.aggregator(v, None, "visual"))
        if tokens is not None:
            out.l, out.l_agg = self.encode_text(tokens, mask)
            out.l_mask = mask
        return out

    def encode_observation(self, images: torch.Tensor) -> EncoderOutput:
        """Single downstream image: the frame's tokens stand in for both states."""
        v0 = self.encode_frame(images)
        v = self.causality_merge(v0, v0)
        return EncoderOutput(v=v, v_agg=self.aggregator(v, None, "visual"))
