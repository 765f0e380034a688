"""Tokenization and the frozen toy language encoder."""
from __future__ import annotations

import json
import math
import re
import warnings
from pathlib import Path

import numpy as np
import torch
from torch import nn

PAD_ID = 0
UNK_ID = 1
_RESERVED = ("<pad>", "<unk>")
_WORD = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Token <-> id map with ids 0 (pad) and 1 (unk) reserved."""

    def __init__(self, tokens, seed: int = 0):
        tokens = list(tokens)
        if tuple(tokens[:2]) != _RESERVED:
            tokens = list(_RESERVED) + [t for t in tokens if t not in _RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.seed = seed
        self._index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, corpus, seed: int = 0) -> "Vocabulary":
        """Sorted word inventory of ``corpus`` (stable across runs)."""
        words = sorted({w for text in corpus for w in split_words(text)})
        return cls(list(_RESERVED) + words, seed=seed)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.seed == other.seed

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text(json.dumps({"tokens": self.tokens, "seed": self.seed}, indent=1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        raw = json.loads(Path(path).read_text())
        return cls(raw["tokens"], seed=raw.get("seed", 0))

    def to_dict(self):
        return {"tokens": self.tokens, "seed": self.seed}


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(instruction: str, vocab: Vocabulary, max_len: int):
    """Map text to ``max_len`` ids plus a mask marking real tokens.

    Long instructions are truncated; short ones are right-padded with the pad id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = split_words(instruction)
    if not words:
        warnings.warn("empty instruction tokenized to all padding", stacklevel=2)
    ids = [vocab.id(w) for w in words[:max_len]]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out, mask


def sinusoid_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / dim)
    table = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table.float()


class FrozenTextEncoder(nn.Module):
    """Non-contextual frozen lookup + sinusoid positions, then a trainable projection.

    Stands in for a pretrained language model: any module mapping
    ``(ids, mask) -> (B, L, dim)`` with padded rows zeroed can replace it.
    """

    def __init__(self, vocab: Vocabulary, max_len: int, dim: int, lang_dim: int | None = None):
        super().__init__()
        lang_dim = lang_dim or dim
        self.vocab_size = len(vocab)
        self.max_len = max_len
        gen = torch.Generator().manual_seed(vocab.seed)
        self.register_buffer("table", torch.randn(len(vocab), lang_dim, generator=gen))
        self.register_buffer("positions", sinusoid_table(max_len, lang_dim))
        self.proj = nn.Linear(lang_dim, dim)

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {"table": self.table, "positions": self.positions}

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} >= vocabulary size {self.vocab_size}")
        if ids.shape[-1] != self.max_len:
            raise ValueError(f"expected {self.max_len} tokens, got {ids.shape[-1]}")
        with torch.no_grad():
            frozen = self.table[ids] + self.positions
        out = self.proj(frozen.to(self.proj.weight.dtype))
        return out * mask.unsqueeze(-1).to(out.dtype)
