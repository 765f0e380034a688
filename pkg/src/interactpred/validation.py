"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import KeyframeTriplet, ValidationError


def check_triplets(X, min_samples: int = 1) -> list[KeyframeTriplet]:
    """Return ``X`` as a list of triplets, rejecting anything else."""
    if isinstance(X, KeyframeTriplet):
        raise ValidationError("expected a sequence of KeyframeTriplet, got a single triplet")
    items = list(X)
    if len(items) < min_samples:
        raise ValidationError(f"need at least {min_samples} triplet(s), got {len(items)}")
    for i, item in enumerate(items):
        if not isinstance(item, KeyframeTriplet):
            raise ValidationError(f"item {i} is {type(item).__name__}, not KeyframeTriplet")
    return items


def check_images(X) -> np.ndarray:
    """Validate raw RGB frames: (N, H, W, 3) uint8, or a single (H, W, 3) frame."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"expected (N, H, W, 3) images, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValidationError(f"expected uint8 images, got {arr.dtype}")
    if len(arr) == 0:
        raise ValidationError("no images given")
    return arr


def check_proprio(P, n: int) -> np.ndarray:
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape != (n, 3):
        raise ValidationError(f"expected proprio of shape ({n}, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("proprio contains non-finite values")
    return arr


def check_instructions(texts: Sequence[str], n: int) -> list[str]:
    if isinstance(texts, str):
        texts = [texts]
    texts = list(texts)
    if len(texts) != n:
        raise ValidationError(f"got {len(texts)} instructions for {n} images")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise ValidationError(f"instruction {i} is {type(t).__name__}, not str")
    return texts
