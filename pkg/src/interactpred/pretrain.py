"""Model assembly, training step, pre-training loop and held-out evaluation."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from .config import ModelConfig, TrainConfig
from .data import KeyframeTriplet, TrainingSample, batch_iterator, preprocess_frame
from .decoder import BoxHead, JointDecoder, MLPFrameDecoder, PixelHead
from .encoder import MultimodalEncoder
from .objective import box_iou, detection_loss, info_nce, prediction_loss, total_loss
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Batch:
    inputs: torch.Tensor    # (B, 2, 3, H, W)
    target: torch.Tensor    # (B, 3, H, W)
    boxes: torch.Tensor     # (B, 4)
    tokens: torch.Tensor    # (B, L_lang)
    mask: torch.Tensor      # (B, L_lang) bool
    alpha: torch.Tensor     # (B,)

    def to(self, dtype):
        return Batch(self.inputs.to(dtype), self.target.to(dtype), self.boxes.to(dtype),
                     self.tokens, self.mask, self.alpha)


def collate(samples: Sequence[TrainingSample], dtype=torch.float32) -> Batch:
    return Batch(
        inputs=torch.from_numpy(np.stack([s.input_pair for s in samples])).to(dtype),
        target=torch.from_numpy(np.stack([s.target_frame for s in samples])).to(dtype),
        boxes=torch.from_numpy(np.stack([s.target_box.as_array() for s in samples])).to(dtype),
        tokens=torch.from_numpy(np.stack([s.tokens for s in samples])),
        mask=torch.from_numpy(np.stack([s.pad_mask for s in samples])),
        alpha=torch.tensor([s.alpha for s in samples]),
    )


class InteractionModel(nn.Module):
    """Encoder plus the decoder configuration selected by the ablation switches."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, decoder_mode: str = "full",
                 causality: str = "deformable", modality: str = "vision_language"):
        super().__init__()
        self.cfg, self.vocab = cfg, vocab
        self.decoder_mode, self.causality, self.modality = decoder_mode, causality, modality
        self.encoder = MultimodalEncoder(cfg, vocab, causality)
        self.pixel_head = self.box_head = self.mlp_decoder = self.decoder = None
        if decoder_mode == "mlp":
            tokens = cfg.num_patches * (1 if causality == "deformable" else 2)
            self.mlp_decoder = MLPFrameDecoder(cfg, tokens)
        else:
            predict = decoder_mode in ("full", "pred_only")
            detect = decoder_mode in ("full", "det_only")
            self.decoder = JointDecoder(cfg, predict=predict, detect=detect)
            if predict:
                self.pixel_head = PixelHead(cfg)
            if detect:
                self.box_head = BoxHead(cfg.dim)

    @property
    def uses_language(self) -> bool:
        return self.modality == "vision_language"

    def language_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()
                if n.startswith("encoder.text.") or n == "encoder.aggregator.latents.language"]

    def forward(self, batch: Batch) -> dict:
        if self.uses_language:
            enc = self.encoder(batch.inputs, batch.tokens, batch.mask)
        else:
            enc = self.encoder(batch.inputs)
        out = {"enc": enc, "frame": None, "box": None}
        if self.mlp_decoder is not None:
            out["frame"] = self.mlp_decoder(enc.v)
            return out
        state = self.decoder(enc)
        out["state"] = state
        if self.pixel_head is not None:
            out["frame"] = self.pixel_head(state.q_pred)
        if self.box_head is not None:
            out["box"] = self.box_head(state.q_det)
        return out

    def set_mean_frame(self, frame: torch.Tensor):
        """Initialize the pixel output bias from a mean (3, H, W) training frame."""
        for head in (self.pixel_head, self.mlp_decoder):
            if head is not None:
                head.set_mean_frame(frame)

    def losses(self, batch: Batch, out: dict | None = None):
        out = out if out is not None else self(batch)
        zero = batch.target.new_zeros(())
        l_pred = prediction_loss(out["frame"], batch.target) if out["frame"] is not None else zero
        l_det = detection_loss(out["box"], batch.boxes) if out["box"] is not None else zero
        enc = out["enc"]
        if self.uses_language:
            l_con = info_nce(enc.v_agg, enc.l_agg, self.cfg.temperature)
        else:
            l_con = zero
        return total_loss((l_pred, l_det, l_con), self.cfg.lambdas)


def build_model(cfg: TrainConfig, vocab: Vocabulary) -> InteractionModel:
    torch.manual_seed(cfg.seed)
    model = InteractionModel(cfg.model, vocab, cfg.decoder_mode, cfg.causality, cfg.modality)
    if cfg.dtype == "float64":
        model = model.double()
    return model


def mean_frame(dataset: Sequence[KeyframeTriplet], image_size: int) -> torch.Tensor:
    """Per-pixel mean over every keyframe of ``dataset``, preprocessed."""
    acc = np.zeros((3, image_size, image_size))
    for t in dataset:
        for f in t.frames:
            acc += preprocess_frame(f, image_size)
    return torch.from_numpy(acc / (3 * len(dataset)))


def build_optimizer(model: InteractionModel, cfg: TrainConfig) -> torch.optim.AdamW:
    skip = set(model.language_parameter_names()) if not model.uses_language else set()
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if name in skip:
            continue
        if p.ndim < 2 or name.endswith(("pos_embed", "query_pred")):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas)


def lr_factor(step: int, total: int, warmup_fraction: float) -> float:
    """Linear warmup, then cosine decay to zero."""
    warm = max(1, math.ceil(warmup_fraction * total))
    if step < warm:
        return (step + 1) / warm
    return 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))


def train_step(model: InteractionModel, batch: Batch, optimizer, step: int = 0) -> dict:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    parts = model.losses(batch)
    for name in ("l_pred", "l_det", "l_con", "total"):
        if not torch.isfinite(getattr(parts, name)):
            raise TrainingError(f"non-finite {name} at step {step}")
    parts.total.backward()
    optimizer.step()
    return {
        "step": step,
        **parts.as_floats(),
        "weights": list(parts.weights),
        "lr": optimizer.param_groups[0]["lr"],
        "alphas": batch.alpha.tolist(),
        "sidecar": {"wall_clock": time.time()},
    }


def _write_metrics(records, path: Path):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)


def run_pretraining(cfg: TrainConfig, dataset: Sequence[KeyframeTriplet], out_dir=None,
                    vocab: Vocabulary | None = None, progress: bool = False):
    """Train for ``cfg.epochs`` epochs; returns (model, metrics records, checkpoint path)."""
    from .data import default_vocabulary

    vocab = vocab or default_vocabulary(cfg.model.vocab_seed)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    model = build_model(cfg, vocab)
    if len(dataset):
        model.set_mean_frame(mean_frame(dataset, cfg.model.image_size))
    optimizer = build_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_factor(s, total, cfg.warmup_fraction))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    records, ckpt_path = [], None
    batches = batch_iterator(dataset, cfg.data, cfg.batch_size, vocab, cfg.model.max_text_len,
                             epochs=cfg.epochs)
    for step, samples in enumerate(batches):
        if step >= total:
            break
        rec = train_step(model, collate(samples, dtype), optimizer, step)
        rec["epoch"] = step // steps_per_epoch
        records.append(rec)
        scheduler.step()
        if progress and step % 50 == 0:
            log.info("step %d total %.4f (pred %.4f det %.4f con %.4f)", step, rec["total"],
                     rec["l_pred"], rec["l_det"], rec["l_con"])
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save(model, out_dir / "checkpoint.json", cfg, step + 1, optimizer)
            _write_metrics(records, out_dir / "metrics.ndjson")
    if out_dir is not None:
        ckpt_path = save(model, out_dir / "checkpoint.json", cfg, len(records), optimizer)
        _write_metrics(records, out_dir / "metrics.ndjson")
    return model, records, ckpt_path


def save(model: InteractionModel, path, cfg: TrainConfig, step: int = 0, optimizer=None):
    return ckpt_io.save_checkpoint(path, model, cfg.to_dict(), model.vocab.to_dict(), step, optimizer)


def load_model(path, expect: TrainConfig | None = None):
    """Rebuild an :class:`InteractionModel` from a checkpoint; returns (model, cfg, ckpt)."""
    ckpt = ckpt_io.load_checkpoint(path, expect.to_dict() if expect is not None else None)
    try:
        cfg = TrainConfig.from_dict(ckpt.config)
    except Exception as exc:
        raise ckpt_io.CheckpointError(f"checkpoint config invalid: {exc}") from exc
    vocab = Vocabulary(ckpt.vocab["tokens"], seed=ckpt.vocab.get("seed", 0))
    cfg32 = TrainConfig.from_dict(dict(ckpt.config, dtype="float32"))
    model = build_model(cfg32, vocab)
    ckpt_io.restore_model(model, ckpt)
    model.eval()
    return model, cfg, ckpt


# --------------------------------------------------------------------------
# held-out evaluation

def _transition_batch(triplets, image_size, vocab, max_len):
    """Inputs (initial, final), target transition: the alpha=1 arrangement."""
    inputs, targets, boxes, toks, masks = [], [], [], [], []
    for t in triplets:
        f = [preprocess_frame(x, image_size) for x in t.frames]
        inputs.append(np.stack([f[0], f[2]]))
        targets.append(f[1])
        boxes.append(t.boxes[1].as_array())
        ids, m = tokenize(t.instruction, vocab, max_len)
        toks.append(ids)
        masks.append(m)
    return Batch(torch.from_numpy(np.stack(inputs)), torch.from_numpy(np.stack(targets)),
                 torch.from_numpy(np.stack(boxes)), torch.from_numpy(np.stack(toks)),
                 torch.from_numpy(np.stack(masks)), torch.ones(len(triplets), dtype=torch.long))


@torch.no_grad()
def evaluate_pretraining(model: InteractionModel, triplets: Sequence[KeyframeTriplet],
                         batch_size: int = 64, reference_size=None) -> dict:
    """Held-out transition-frame MSE against copy baselines, and box IoU against a center box.

    ``reference_size`` is the (w, h) of the constant center box; defaults to the
    mean target size of ``triplets``.
    """
    model.eval()
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    sums = {"pred_mse": 0.0, "copy_initial_mse": 0.0, "copy_second_mse": 0.0,
            "box_iou": 0.0, "center_box_iou": 0.0}
    boxes_all = np.stack([t.boxes[1].as_array() for t in triplets])
    if reference_size is None:
        reference_size = boxes_all[:, 2:].mean(0)
    center = torch.tensor([0.5, 0.5, *reference_size], dtype=dtype)
    has_box = model.box_head is not None
    has_frame = model.pixel_head is not None or model.mlp_decoder is not None
    n = len(triplets)
    for start in range(0, n, batch_size):
        batch = _transition_batch(triplets[start:start + batch_size], cfg.image_size, model.vocab,
                                  cfg.max_text_len).to(dtype)
        out = model(batch)
        per = lambda a, b: ((a - b) ** 2).flatten(1).mean(1).sum().item()
        if has_frame:
            sums["pred_mse"] += per(out["frame"], batch.target)
        sums["copy_initial_mse"] += per(batch.inputs[:, 0], batch.target)
        sums["copy_second_mse"] += per(batch.inputs[:, 1], batch.target)
        if has_box:
            sums["box_iou"] += box_iou(out["box"], batch.boxes).sum().item()
        sums["center_box_iou"] += box_iou(center.expand_as(batch.boxes), batch.boxes).sum().item()
    report = {k: v / n for k, v in sums.items()}
    if not has_frame:
        report["pred_mse"] = None
    if not has_box:
        report["box_iou"] = None
    report["num_samples"] = n
    return report
