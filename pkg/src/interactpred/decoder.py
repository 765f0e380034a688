"""Joint prediction/detection decoder and its output heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoder import EncoderOutput, patchify, unpatchify
from .layers import MLP, FeedForward, MultiHeadAttention, sincos_2d


@dataclass
class DecoderState:
    q_pred: torch.Tensor | None   # (B, L_vis, d)
    q_det: torch.Tensor | None    # (B, d)
    layer: int


class DecoderLayer(nn.Module):
    """Cross-attention to encoder memory, joint self-attention, feed-forward; post-norm."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.cross_attn = MultiHeadAttention(dim, heads)
        # keys start in the query space so matching patch codes attend to each other at step 0
        with torch.no_grad():
            self.cross_attn.k.weight.copy_(self.cross_attn.q.weight)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, memory, memory_mask=None, memory_keys=None):
        x = self.norm1(x + self.cross_attn(x, memory, memory_mask, memory_keys))
        x = self.norm2(x + self.self_attn(x, x))
        return self.norm3(x + self.ffn(x))


class JointDecoder(nn.Module):
    """Evolves the prediction queries and the detection query together.

    The detection query starts as the aggregated visual token; the joint
    self-attention over ``[q_pred; q_det]`` is the only path between them.
    Each patch has a code (learned, random-normal, plus fixed sin-cos) that is
    both the initial prediction query for that patch and an additive term on
    that patch's memory key, tying query r to patch r.
    """

    def __init__(self, cfg: ModelConfig, predict: bool = True, detect: bool = True):
        super().__init__()
        if not (predict or detect):
            raise ValueError("decoder needs at least one of predict/detect")
        self.predict, self.detect = predict, detect
        d = cfg.dim
        # unit-variance rows are nearly orthogonal, so codes start distinguishable
        self.query_pred = nn.Parameter(torch.randn(cfg.num_patches, d))
        self.register_buffer("query_pos", sincos_2d(cfg.grid_size, d))
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.decoder_heads, cfg.mlp_ratio)
                                    for _ in range(cfg.decoder_depth))

    def initial_state(self, enc: EncoderOutput) -> DecoderState:
        b = enc.v.shape[0]
        q_pred = self.patch_codes().expand(b, -1, -1) if self.predict else None
        q_det = enc.v_agg if self.detect else None
        return DecoderState(q_pred, q_det, 0)

    def patch_codes(self) -> torch.Tensor:
        return self.query_pred + self.query_pos

    def forward(self, enc: EncoderOutput, state: DecoderState | None = None) -> DecoderState:
        state = state or self.initial_state(enc)
        memory, mask = enc.v, None
        # side-by-side frames (no causality merge) get the same codes per frame
        reps = enc.v.shape[1] // self.query_pos.shape[0]
        keys = enc.v + self.patch_codes().repeat(reps, 1)
        if enc.l is not None:
            memory = torch.cat([enc.v, enc.l], dim=1)
            keys = torch.cat([keys, enc.l], dim=1)
            vis = torch.ones(enc.v.shape[:2], dtype=torch.bool, device=enc.v.device)
            mask = torch.cat([vis, enc.l_mask.bool()], dim=1)
        parts = [q for q in (state.q_pred, state.q_det[:, None] if self.detect else None)
                 if q is not None]
        x = torch.cat(parts, dim=1)
        for layer in self.layers:
            x = layer(x, memory, mask, keys)
        q_pred = x[:, :-1] if self.detect and self.predict else (x if self.predict else None)
        q_det = x[:, -1] if self.detect else None
        return DecoderState(q_pred, q_det, len(self.layers))


class PixelHead(nn.Module):
    """Per-query linear map to a patch of pixels, reassembled into a frame.

    The projection starts at zero so early steps fit the bias rather than
    suppressing random input-dependent noise; see :meth:`set_mean_frame`.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Linear(cfg.dim, 3 * cfg.patch_size ** 2)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    @torch.no_grad()
    def set_mean_frame(self, frame: torch.Tensor):
        """Start the output bias at the patch-averaged mean of a (3, H, W) frame."""
        self.proj.bias.copy_(patchify(frame[None].to(self.proj.bias.dtype), self.patch_size)
                             .mean((0, 1)))

    def forward(self, q_pred):
        return unpatchify(self.proj(q_pred), self.patch_size)


class BoxHead(nn.Module):
    """Two-layer MLP with logistic output: (cx, cy, w, h) in (0, 1)."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP([dim, dim, 4])

    def forward(self, q_det):
        return torch.sigmoid(self.mlp(q_det))


class MLPFrameDecoder(nn.Module):
    """Ablation decoder: 3-layer MLP from flattened merged tokens straight to pixels."""

    def __init__(self, cfg: ModelConfig, num_tokens: int, hidden: int = 512):
        super().__init__()
        self.size = cfg.image_size
        self.mlp = MLP([num_tokens * cfg.dim, hidden, hidden, 3 * cfg.image_size ** 2])
        nn.init.zeros_(self.mlp.layers[-1].weight)
        nn.init.zeros_(self.mlp.layers[-1].bias)

    @torch.no_grad()
    def set_mean_frame(self, frame: torch.Tensor):
        last = self.mlp.layers[-1]
        last.bias.copy_(frame.reshape(-1).to(last.bias.dtype))

    def forward(self, v):
        return self.mlp(v.flatten(1)).view(-1, 3, self.size, self.size)
