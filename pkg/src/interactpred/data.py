"""Keyframe triplets: manifests, synthetic generation, preprocessing, input selection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .config import DataConfig
from .render import COLORS, SHAPE_KINDS, AGENT_COLOR, Shape, render
from .text import Vocabulary, tokenize

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
FRAME_NAMES = ("initial", "transition", "final")
DIRECTIONS = {
    "right": ((1.0, 0.0), "to the right"),
    "left": ((-1.0, 0.0), "to the left"),
    "up": ((0.0, -1.0), "up"),
    "down": ((0.0, 1.0), "down"),
}
RELATIONS = ("left of", "right of", "above", "below")
DEFAULT_TEMPLATE = "push the {color} {shape} {direction}"


class ManifestError(Exception):
    """Manifest file missing or unreadable."""


class ValidationError(ValueError):
    pass


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"degenerate box {vals}")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValidationError(f"box outside [0,1]: {vals}")

    @classmethod
    def from_seq(cls, seq) -> "BBox":
        vals = [float(v) for v in seq]
        if len(vals) != 4:
            raise ValidationError(f"box needs 4 values, got {len(vals)}")
        return cls(*vals)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float32)

    def corners(self) -> tuple[float, float, float, float]:
        return (max(self.cx - self.w / 2, 0.0), max(self.cy - self.h / 2, 0.0),
                min(self.cx + self.w / 2, 1.0), min(self.cy + self.h / 2, 1.0))


@dataclass
class KeyframeTriplet:
    clip_id: str
    frames: tuple[np.ndarray, np.ndarray, np.ndarray]
    boxes: tuple[BBox, BBox, BBox]
    instruction: str

    def __post_init__(self):
        if len(self.frames) != 3:
            raise ValidationError(f"{self.clip_id}: expected 3 frames, got {len(self.frames)}")
        if len(self.boxes) != 3:
            raise ValidationError(f"{self.clip_id}: expected 3 boxes, got {len(self.boxes)}")
        shape = self.frames[0].shape
        for name, frame in zip(FRAME_NAMES, self.frames):
            if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
                raise ValidationError(f"{self.clip_id}: frame {name} must be HxWx3 uint8")
            if frame.shape != shape:
                raise ValidationError(f"{self.clip_id}: frame {name} size differs within triplet")
        self.boxes = tuple(b if isinstance(b, BBox) else BBox.from_seq(b) for b in self.boxes)
        if not self.instruction or not self.instruction.strip():
            raise ValidationError(f"{self.clip_id}: empty instruction")

    def __eq__(self, other):
        return (isinstance(other, KeyframeTriplet) and self.clip_id == other.clip_id
                and self.instruction == other.instruction and self.boxes == other.boxes
                and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames)))


@dataclass
class TrainingSample:
    input_pair: np.ndarray      # (2, 3, H, W)
    target_frame: np.ndarray    # (3, H, W)
    target_box: BBox
    tokens: np.ndarray
    pad_mask: np.ndarray
    alpha: int
    clip_id: str = ""


@dataclass
class SceneSpec:
    canvas_size: int = 64
    num_distractors: int = 2
    shape_palette: Sequence[tuple[str, str]] = field(
        default_factory=lambda: [(k, c) for k in SHAPE_KINDS for c in COLORS])
    motion: tuple[str, float] = ("right", 0.3)
    instruction_template: str = DEFAULT_TEMPLATE
    object_size: float = 0.22
    agent_radius: float = 0.08
    approach_gap: float = 0.08

    def __post_init__(self):
        direction, frac = self.motion
        if direction not in DIRECTIONS:
            raise GenerationError(f"unknown motion direction {direction!r}")
        if frac < 0:
            raise GenerationError("displacement fraction must be >= 0")
        if self.num_distractors < 0:
            raise GenerationError("num_distractors must be >= 0")
        if not self.shape_palette:
            raise GenerationError("empty shape palette")


# --------------------------------------------------------------------------
# manifests

def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc


def ingest_manifest(path) -> list[KeyframeTriplet]:
    """Load every clip of a manifest, in manifest order, fully validated."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot load manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    clips = raw.get("clips") if isinstance(raw, dict) else None
    if not isinstance(clips, list):
        raise ValidationError(f"manifest {path} lacks a 'clips' array")
    root = path.parent
    out = []
    for i, rec in enumerate(clips):
        clip_id = rec.get("clip_id", f"#{i}") if isinstance(rec, dict) else f"#{i}"
        if not isinstance(rec, dict):
            raise ValidationError(f"clip {clip_id}: record is not an object")
        for key in ("clip_id", "frames", "boxes", "instruction"):
            if key not in rec:
                raise ValidationError(f"clip {clip_id}: missing field '{key}'")
        frames, boxes = [], []
        for name in FRAME_NAMES:
            if name not in rec["frames"]:
                raise ValidationError(f"clip {clip_id}: missing field 'frames.{name}'")
            if name not in rec["boxes"]:
                raise ValidationError(f"clip {clip_id}: missing field 'boxes.{name}'")
            frames.append(_load_png(root / rec["frames"][name]))
            try:
                boxes.append(BBox.from_seq(rec["boxes"][name]))
            except (ValidationError, TypeError) as exc:
                raise ValidationError(f"clip {clip_id}: field 'boxes.{name}': {exc}") from exc
        try:
            out.append(KeyframeTriplet(str(rec["clip_id"]), tuple(frames), tuple(boxes),
                                       str(rec["instruction"])))
        except ValidationError as exc:
            raise ValidationError(f"clip {clip_id}: {exc}") from exc
    return out


def write_manifest(triplets: Sequence[KeyframeTriplet], directory) -> Path:
    """Write PNG frames plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for t in triplets:
        rec = {"clip_id": t.clip_id, "frames": {}, "boxes": {}, "instruction": t.instruction}
        for name, frame, box in zip(FRAME_NAMES, t.frames, t.boxes):
            rel = f"{t.clip_id}_{name}.png"
            Image.fromarray(frame).save(directory / rel)
            rec["frames"][name] = rel
            rec["boxes"][name] = [box.cx, box.cy, box.w, box.h]
        records.append(rec)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"clips": records}, indent=1))
    return manifest


# --------------------------------------------------------------------------
# preprocessing and input selection

def preprocess_frame(raw: np.ndarray, image_size: int) -> np.ndarray:
    """Center-crop to square, bilinear resize, ImageNet-normalize, channel-first."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ValueError(f"expected a non-empty HxWx3 image, got shape {raw.shape}")
    h, w = raw.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    crop = raw[top:top + side, left:left + side]
    if side != image_size:
        crop = np.asarray(Image.fromarray(crop.astype(np.uint8)).resize(
            (image_size, image_size), Image.BILINEAR))
    x = crop.astype(np.float32) / 255.0
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of the normalization step; returns HxWx3 uint8."""
    img = np.asarray(x).transpose(1, 2, 0) * IMAGENET_STD + IMAGENET_MEAN
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def select_input_frames(triplet: KeyframeTriplet, p: float, rng: np.random.Generator,
                        image_size: int | None = None, vocab: Vocabulary | None = None,
                        max_len: int = 20) -> TrainingSample:
    """Draw alpha ~ Bernoulli(p) and arrange inputs and target accordingly.

    alpha=0: inputs (initial, transition), target final.
    alpha=1: inputs (initial, final), target transition.
    The target box is always the one annotated on the target frame.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    alpha = int(rng.random() < p)
    second, target = (2, 1) if alpha else (1, 2)
    size = image_size or triplet.frames[0].shape[0]
    pre = [preprocess_frame(triplet.frames[i], size) for i in (0, second, target)]
    if vocab is not None:
        tokens, mask = tokenize(triplet.instruction, vocab, max_len)
    else:
        tokens, mask = np.zeros(max_len, dtype=np.int64), np.zeros(max_len, dtype=bool)
    return TrainingSample(
        input_pair=np.stack(pre[:2]), target_frame=pre[2], target_box=triplet.boxes[target],
        tokens=tokens, pad_mask=mask, alpha=alpha, clip_id=triplet.clip_id)


def batch_iterator(dataset: Sequence[KeyframeTriplet], cfg: DataConfig, batch_size: int,
                   vocab: Vocabulary | None = None, max_len: int = 20,
                   epochs: int = 1) -> Iterator[list[TrainingSample]]:
    """Shuffled, preprocessed batches; the last short batch of each epoch is kept."""
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            yield [select_input_frames(dataset[i], cfg.p, rng, cfg.image_size, vocab, max_len)
                   for i in order[start:start + batch_size]]


# --------------------------------------------------------------------------
# synthetic interaction scenes

def _overlaps(a: tuple, b: tuple, margin: float = 0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _extent(cx, cy, half):
    return (cx - half, cy - half, cx + half, cy + half)


def generate_synthetic_triplet(spec: SceneSpec, rng: np.random.Generator,
                               clip_id: str = "clip") -> KeyframeTriplet:
    """Render an agent disc pushing a target shape, with static distractors."""
    (ux, uy), phrase = DIRECTIONS[spec.motion[0]]
    disp = float(spec.motion[1])
    half, r = spec.object_size / 2, spec.agent_radius
    back = half + r + spec.approach_gap
    # feasible interval for the start coordinate along the motion axis
    if ux + uy > 0:
        lo, hi = max(half, back + r), 1 - half - disp
    else:
        lo, hi = half + disp, min(1 - half, 1 - back - r)
    if lo > hi:
        raise GenerationError(
            f"motion {spec.motion} cannot keep objects on a unit canvas with object_size="
            f"{spec.object_size}")
    along = rng.uniform(lo, hi)
    across = rng.uniform(max(half, r), 1 - max(half, r))
    kind_idx = rng.integers(len(spec.shape_palette))
    kind, color = spec.shape_palette[kind_idx]

    def at(offset):
        return (along + offset * (ux + uy), across) if ux else (across, along + offset * (ux + uy))

    targets = [at(0.0), at(disp / 2), at(disp)]
    agents = [at(-back), at(disp / 2 - half - r), at(disp - half - r)]
    target_shapes = [Shape(kind, COLORS[color], x, y, half) for x, y in targets]
    agent_shapes = [Shape("disc", AGENT_COLOR, x, y, r) for x, y in agents]

    # region swept by target and agent, kept free of distractors
    swept = [_extent(s.cx, s.cy, s.half) for s in target_shapes + agent_shapes]
    choices = [i for i, pc in enumerate(spec.shape_palette) if tuple(pc) != (kind, color)]
    if spec.num_distractors and not choices:
        raise GenerationError("palette has no distractor candidates")
    distractors, taken = [], list(swept)
    for _ in range(spec.num_distractors):
        for _attempt in range(500):
            k, c = spec.shape_palette[choices[rng.integers(len(choices))]]
            dx, dy = rng.uniform(half, 1 - half, size=2)
            ext = _extent(dx, dy, half)
            if not any(_overlaps(ext, t, margin=0.02) for t in taken):
                break
        else:
            raise GenerationError(f"cannot place {spec.num_distractors} distractors on the canvas")
        taken.append(ext)
        distractors.append(Shape(k, COLORS[c], dx, dy, half))

    frames = tuple(render(distractors + [t, a], spec.canvas_size)
                   for t, a in zip(target_shapes, agent_shapes))
    boxes = tuple(BBox(*t.box()) for t in target_shapes)
    instruction = spec.instruction_template.format(color=color, shape=kind, direction=phrase)
    return KeyframeTriplet(clip_id, frames, boxes, instruction)


def generate_interaction_dataset(num: int, seed: int, canvas_size: int = 64,
                                 num_distractors: int = 2,
                                 displacement=(0.2, 0.35)) -> list[KeyframeTriplet]:
    """``num`` triplets with random motion directions; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    names = list(DIRECTIONS)
    out = []
    for i in range(num):
        spec = SceneSpec(canvas_size=canvas_size, num_distractors=num_distractors,
                         motion=(names[rng.integers(len(names))], float(rng.uniform(*displacement))))
        out.append(generate_synthetic_triplet(spec, rng, clip_id=f"clip_{i:05d}"))
    return out


def lexicon_corpus() -> list[str]:
    """Every word the synthetic generators can emit, as a text corpus."""
    words = list(COLORS) + list(SHAPE_KINDS)
    words += [w for _, phrase in DIRECTIONS.values() for w in phrase.split()]
    words += [w for rel in RELATIONS for w in rel.split()]
    words += DEFAULT_TEMPLATE.replace("{color}", "").replace("{shape}", "").replace(
        "{direction}", "").split()
    return [" ".join(words)]


def default_vocabulary(seed: int = 0) -> Vocabulary:
    return Vocabulary.build(lexicon_corpus(), seed=seed)
