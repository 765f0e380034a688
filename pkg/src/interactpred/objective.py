"""Pre-training losses: frame MSE, L1 + GIoU box loss, symmetric InfoNCE."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossBreakdown:
    l_pred: torch.Tensor
    l_det: torch.Tensor
    l_con: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float, float]

    def as_floats(self) -> dict[str, float]:
        return {"l_pred": float(self.l_pred.detach()), "l_det": float(self.l_det.detach()),
                "l_con": float(self.l_con.detach()), "total": float(self.total.detach())}


def prediction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def box_corners(boxes: torch.Tensor) -> torch.Tensor:
    """(cx, cy, w, h) -> (x0, y0, x1, y1), clipped to the unit canvas."""
    cx, cy, w, h = boxes.unbind(-1)
    out = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    return out.clamp(0.0, 1.0)


def _check_boxes(boxes):
    if bool((boxes[..., 2:] <= 0).any()):
        raise ValueError("degenerate box: width and height must be positive")


def corner_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU between corner-format boxes (..., 4); no clipping."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


def giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of normalized (cx, cy, w, h) boxes, elementwise over leading dims."""
    _check_boxes(a)
    _check_boxes(b)
    return corner_giou(box_corners(a), box_corners(b))


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ca, cb = box_corners(a), box_corners(b)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    iw = (torch.minimum(ca[..., 2], cb[..., 2]) - torch.maximum(ca[..., 0], cb[..., 0])).clamp(min=0)
    ih = (torch.minimum(ca[..., 3], cb[..., 3]) - torch.maximum(ca[..., 1], cb[..., 1])).clamp(min=0)
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def detection_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean-over-coordinates L1 plus (1 - GIoU), averaged over the batch."""
    l1 = (pred - target).abs().mean(-1)
    return (l1 + 1.0 - giou(pred, target)).mean()


def info_nce(v: torch.Tensor, l: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric contrastive loss on cosine similarities; matched pairs on the diagonal."""
    if v.dim() != 2 or v.shape != l.shape:
        raise ValueError(f"expected equal (B, d) batches, got {tuple(v.shape)} and {tuple(l.shape)}")
    if v.shape[0] == 0:
        raise ValueError("empty batch")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if bool((v.norm(dim=-1) == 0).any()) or bool((l.norm(dim=-1) == 0).any()):
        raise ValueError("zero-norm embedding in contrastive loss")
    sim = F.normalize(v, dim=-1) @ F.normalize(l, dim=-1).T
    logits = sim / temperature
    labels = torch.arange(v.shape[0], device=v.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def total_loss(parts, weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be three non-negative numbers, got {weights}")
    parts = [p if torch.is_tensor(p) else torch.tensor(float(p), dtype=torch.float64) for p in parts]
    total = sum(w * p for w, p in zip(weights, parts))
    return LossBreakdown(*parts, total=total, weights=tuple(float(w) for w in weights))
