"""Referring expression grounding on synthetic multi-shape scenes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from ..data import RELATIONS, BBox, ValidationError
from ..layers import MLP, AttentionPool
from ..objective import box_iou, detection_loss
from ..pretrain import lr_factor
from ..render import COLORS, SHAPE_KINDS, Shape, render
from ..text import Vocabulary, tokenize
from .policy import FrozenFeatures

AP_THRESHOLDS = (0.25, 0.5, 0.75)


@dataclass
class RegSample:
    image: np.ndarray
    instruction: str
    box: BBox


def _relation_holds(rel: str, a: Shape, b: Shape, margin: float = 0.1) -> bool:
    return {"left of": a.cx < b.cx - margin, "right of": a.cx > b.cx + margin,
            "above": a.cy < b.cy - margin, "below": a.cy > b.cy + margin}[rel]


def generate_reg_scene(rng: np.random.Generator, canvas_size: int = 64,
                       num_shapes=(3, 6), size=(0.18, 0.28)) -> RegSample:
    """3-6 shapes with distinct (color, kind) pairs, so the referent is unique."""
    n = int(rng.integers(num_shapes[0], num_shapes[1] + 1))
    combos = [(k, c) for k in SHAPE_KINDS for c in COLORS]
    picks = rng.choice(len(combos), size=n, replace=False)
    shapes, extents = [], []
    for idx in picks:
        kind, color = combos[idx]
        for _ in range(500):
            half = rng.uniform(*size) / 2
            cx, cy = rng.uniform(half, 1 - half, size=2)
            ext = (cx - half, cy - half, cx + half, cy + half)
            if all(ext[2] + 0.02 <= e[0] or e[2] + 0.02 <= ext[0]
                   or ext[3] + 0.02 <= e[1] or e[3] + 0.02 <= ext[1] for e in extents):
                break
        else:
            raise ValidationError("cannot place grounding scene shapes")
        extents.append(ext)
        shapes.append((kind, color, Shape(kind, COLORS[color], cx, cy, half)))
    t = int(rng.integers(n))
    kind, color, target = shapes[t]
    text = f"the {color} {kind}"
    if rng.random() < 0.5:
        others = [s for i, s in enumerate(shapes) if i != t]
        rng.shuffle(others)
        for ok, oc, other in others:
            rels = [r for r in RELATIONS if _relation_holds(r, target, other)]
            if rels:
                text += f" {rels[int(rng.integers(len(rels)))]} the {oc} {ok}"
                break
    image = render([s for _, _, s in shapes], canvas_size)
    return RegSample(image, text, BBox(*target.box()))


def generate_reg_dataset(num: int, seed: int, canvas_size: int = 64) -> list[RegSample]:
    rng = np.random.default_rng(seed)
    return [generate_reg_scene(rng, canvas_size) for _ in range(num)]


def save_reg_dataset(samples, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        name = f"scene_{i:05d}.png"
        Image.fromarray(s.image).save(directory / name)
        records.append({"image": name, "instruction": s.instruction,
                        "box": [s.box.cx, s.box.cy, s.box.w, s.box.h]})
    path = directory / "manifest.json"
    path.write_text(json.dumps({"scenes": records}, indent=1))
    return path


def load_reg_dataset(directory) -> list[RegSample]:
    directory = Path(directory)
    raw = json.loads((directory / "manifest.json").read_text())
    return [RegSample(np.asarray(Image.open(directory / r["image"]).convert("RGB")),
                      r["instruction"], BBox.from_seq(r["box"])) for r in raw["scenes"]]


class GroundingHead(nn.Module):
    """Attention pooling over [visual rows; language rows], then a 2-layer box MLP.

    The pooling latent is a free parameter plus a projection of the mean
    instruction embedding, so which visual rows get attended depends on the
    sentence. With a fixed latent the relative weights over visual rows are the
    same for every instruction.
    """

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.pool = AttentionPool(dim, heads)
        # unit scale: a near-zero latent starts the pool at uniform attention
        self.latent = nn.Parameter(torch.randn(dim))
        self.lang_proj = nn.Linear(dim, dim)
        self.box = MLP([dim, dim, 4])

    def forward(self, visual, lang, lang_mask):
        # visual: (B, Lv, d) with Lv = 1 for the aggregated embedding
        keep = lang_mask.to(lang.dtype).unsqueeze(-1)
        lang_mean = (lang * keep).sum(1) / keep.sum(1).clamp(min=1.0)
        latent = self.latent + self.lang_proj(lang_mean)
        tokens = torch.cat([visual, lang], dim=1)
        vis_mask = torch.ones(visual.shape[:2], dtype=torch.bool)
        mask = torch.cat([vis_mask, lang_mask.bool()], dim=1)
        return torch.sigmoid(self.box(self.pool(latent, tokens, mask)))


class GroundingInputs:
    """Frozen visual and language embeddings for a set of samples."""

    def __init__(self, encoder, vocab: Vocabulary, use_aggregated: bool):
        self.features = FrozenFeatures(encoder)
        self.text = encoder.text
        self.vocab = vocab
        self.max_len = encoder.cfg.max_text_len
        self.use_aggregated = use_aggregated

    @torch.no_grad()
    def __call__(self, images, instructions):
        v, v_agg = self.features(images)
        visual = v_agg[:, None] if self.use_aggregated else v
        toks = [tokenize(t, self.vocab, self.max_len) for t in instructions]
        ids = torch.from_numpy(np.stack([a for a, _ in toks]))
        mask = torch.from_numpy(np.stack([m for _, m in toks]))
        return visual, self.text(ids, mask).to(visual.dtype), mask


def adapt_reg_head(encoder, vocab: Vocabulary, data, use_aggregated: bool = False,
                   epochs: int = 10, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                   warmup_fraction: float = 0.05):
    """Train a grounding head on frozen embeddings; returns (head, inputs, epoch losses).

    AdamW with linear warmup then cosine decay, as in pre-training.
    """
    torch.manual_seed(seed)
    inputs = GroundingInputs(encoder, vocab, use_aggregated)
    visual, lang, mask = inputs([s.image for s in data], [s.instruction for s in data])
    target = torch.from_numpy(np.stack([s.box.as_array() for s in data])).to(visual.dtype)
    head = GroundingHead(encoder.cfg.dim).to(visual.dtype)
    opt = torch.optim.AdamW(head.parameters(), lr=lr)
    total = epochs * math.ceil(len(data) / batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: lr_factor(k, total, warmup_fraction))
    gen = torch.Generator().manual_seed(seed)
    history = []
    for _ in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        running = 0.0
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            loss = detection_loss(head(visual[idx], lang[idx], mask[idx]), target[idx])
            if not torch.isfinite(loss):
                raise RuntimeError("non-finite grounding loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        history.append(running / len(data))
    return head.eval(), inputs, history


def average_precision(pred: torch.Tensor, target: torch.Tensor, thresholds=AP_THRESHOLDS) -> dict:
    """Single box per image: AP at a threshold is the fraction with IoU >= threshold."""
    iou = box_iou(pred, target)
    return {f"ap{int(round(t * 100))}": float((iou >= t).double().mean()) for t in thresholds}


@torch.no_grad()
def evaluate_reg(head: GroundingHead, inputs: GroundingInputs, data) -> dict:
    visual, lang, mask = inputs([s.image for s in data], [s.instruction for s in data])
    pred = head(visual, lang, mask)
    target = torch.from_numpy(np.stack([s.box.as_array() for s in data])).to(pred.dtype)
    return average_precision(pred, target)
