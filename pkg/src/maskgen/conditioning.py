"""
Conditioning sequence construction.

A prompt is split on whitespace; plain words read from a word table and
handle tokens ("<asset0>", "<asset1>", ...) read from a separate handle
table, then a fixed sinusoidal positional encoding is added. Each injected
mask is area-averaged to a P x P grid and mapped to one embedding by a
single affine layer; mask embeddings are appended after the text positions.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArgumentError, ConfigError, MaskValidationError, TokenizationError

PAD = "<pad>"
NULL = "<null>"
HANDLE_RE = re.compile(r"^<asset(\d+)>$")
# Token tables start small so a few hundred handle steps at lr 5e-4 can cross
# between word embeddings; the positional code is scaled to the same range.
WORD_INIT_STD = 0.05
POSITION_SCALE = 0.1

TEXT = "text"
HANDLE = "handle"
MASK_TOKEN = "mask-token"


def handle_token(i: int) -> str:
    return f"<asset{i}>"


def tokenize(prompt: str) -> list[str]:
    return prompt.split()


class Vocabulary:
    """Word -> id table. Plain words first, handles last in one contiguous range."""

    def __init__(self, words: Iterable[str], n_handles: int = 0):
        plain = [PAD, NULL]
        for w in words:
            if HANDLE_RE.match(w):
                raise ConfigError(f"handle-like word {w!r} in plain vocabulary", key="vocab")
            if w not in plain:
                plain.append(w)
        self.words = plain
        self.n_handles = int(n_handles)
        self._ids = {w: i for i, w in enumerate(plain)}

    @property
    def n_words(self) -> int:
        return len(self.words)

    def __len__(self):
        return self.n_words + self.n_handles

    @property
    def handle_ids(self) -> range:
        return range(self.n_words, self.n_words + self.n_handles)

    @property
    def handle_tokens(self) -> list[str]:
        return [handle_token(i) for i in range(self.n_handles)]

    def id(self, token: str) -> int:
        m = HANDLE_RE.match(token)
        if m:
            h = int(m.group(1))
            if h >= self.n_handles:
                known = ", ".join(self.handle_tokens) or "none"
                raise TokenizationError(token, f"unknown handle {token!r}; known handles: {known}")
            return self.n_words + h
        try:
            return self._ids[token]
        except KeyError:
            raise TokenizationError(token) from None

    def with_handles(self, n_handles: int) -> "Vocabulary":
        return Vocabulary(self.words[2:], n_handles)

    def to_dict(self) -> dict:
        return {"words": self.words[2:], "n_handles": self.n_handles}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d["n_handles"])


def sinusoidal_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return table


@dataclass(frozen=True)
class Link:
    kind: str
    subject: int | None = None


@dataclass
class TextEncoding:
    embeddings: torch.Tensor  # (L, d)
    links: list[Link]
    tokens: list[str]


@dataclass
class MaskEmbedding:
    vector: torch.Tensor  # (d,)
    source_subject: int | None = None


@dataclass
class ConditioningBundle:
    embeddings: torch.Tensor  # (K, d)
    links: list[Link] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def positions(self, kind: str, subject: int | None) -> list[int]:
        return [i for i, l in enumerate(self.links) if l.kind == kind and l.subject == subject]

    def handle_position(self, subject: int) -> int:
        pos = self.positions(HANDLE, subject)
        if len(pos) != 1:
            raise ArgumentError(f"subject {subject} has {len(pos)} handle positions, expected 1")
        return pos[0]

    def mask_position(self, subject: int) -> int | None:
        pos = self.positions(MASK_TOKEN, subject)
        if len(pos) > 1:
            raise ArgumentError(f"subject {subject} has {len(pos)} mask-token positions")
        return pos[0] if pos else None


class TextEncoder(nn.Module):
    """Embedding lookup plus fixed positional encoding; no transformer layers."""

    def __init__(self, vocab: Vocabulary, dim: int, max_len: int = 16):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.word_table = nn.Parameter(torch.randn(vocab.n_words, dim) * WORD_INIT_STD)
        self.handles = nn.Parameter(torch.zeros(vocab.n_handles, dim))
        self.register_buffer("positions", (POSITION_SCALE * sinusoidal_table(max_len, dim)).float(),
                             persistent=False)

    def add_handles(self, init: torch.Tensor):
        """Replace the handle table with ``init`` (n_handles, d) and extend the vocabulary."""
        if init.ndim != 2 or init.shape[1] != self.dim:
            raise ConfigError(f"handle init must be (n, {self.dim}), got {tuple(init.shape)}")
        self.vocab = self.vocab.with_handles(init.shape[0])
        self.handles = nn.Parameter(init.detach().clone().to(self.word_table))

    def embed_token(self, token: str) -> torch.Tensor:
        i = self.vocab.id(token)
        if i >= self.vocab.n_words:
            return self.handles[i - self.vocab.n_words]
        return self.word_table[i]

    def forward(self, prompt: str) -> TextEncoding:
        return encode_prompt(prompt, self)


def encode_prompt(prompt: str, encoder: TextEncoder) -> TextEncoding:
    tokens = tokenize(prompt)
    if len(tokens) > encoder.max_len:
        raise ArgumentError(f"prompt has {len(tokens)} tokens, max is {encoder.max_len}")
    if not tokens:
        tokens = [NULL]
    rows, links = [], []
    for tok in tokens:
        rows.append(encoder.embed_token(tok))
        m = HANDLE_RE.match(tok)
        links.append(Link(HANDLE, int(m.group(1))) if m else Link(TEXT))
    pe = encoder.positions[: len(rows)].to(encoder.word_table.dtype)
    return TextEncoding(torch.stack(rows) + pe, links, tokens)


def as_binary_mask(mask, allow_blank: bool = True) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    if t.ndim != 2:
        raise MaskValidationError(f"mask must be 2-D, got shape {tuple(t.shape)}")
    if not torch.all((t == 0) | (t == 1)):
        raise MaskValidationError("mask must be strictly binary {0, 1}")
    if not allow_blank and not torch.any(t):
        raise MaskValidationError("mask is empty")
    return t


def area_downsample(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Mean-pool an (H, W) map onto a size x size grid. H and W must be multiples of size."""
    h, w = mask.shape
    if h % size or w % size:
        raise ArgumentError(f"mask size {h}x{w} is not a multiple of grid {size}")
    return F.avg_pool2d(mask[None, None], (h // size, w // size))[0, 0]


class MaskEncoder(nn.Module):
    def __init__(self, dim: int, grid: int = 16):
        super().__init__()
        self.grid = grid
        self.proj = nn.Linear(grid * grid, dim)

    def forward(self, mask, subject: int | None = None) -> MaskEmbedding:
        return encode_mask(mask, self, subject)


def encode_mask(mask, encoder: MaskEncoder, subject: int | None = None) -> MaskEmbedding:
    m = as_binary_mask(mask).to(encoder.proj.weight.dtype)
    cells = area_downsample(m, encoder.grid).reshape(-1)
    return MaskEmbedding(encoder.proj(cells), subject)


def assemble_bundle(text: TextEncoding, mask_embs: Sequence[MaskEmbedding] = ()) -> ConditioningBundle:
    d = text.embeddings.shape[1]
    rows = [text.embeddings]
    links = list(text.links)
    handle_subjects = [l.subject for l in text.links if l.kind == HANDLE]
    seen = set()
    for me in mask_embs:
        if me.vector.shape != (d,):
            raise ConfigError(f"mask embedding has shape {tuple(me.vector.shape)}, expected ({d},)")
        if me.source_subject is not None:
            if me.source_subject not in handle_subjects:
                raise ArgumentError(f"mask linked to subject {me.source_subject} absent from prompt")
            if me.source_subject in seen:
                raise ArgumentError(f"two masks linked to subject {me.source_subject}")
            seen.add(me.source_subject)
        rows.append(me.vector[None])
        links.append(Link(MASK_TOKEN, me.source_subject))
    return ConditioningBundle(torch.cat(rows, 0), links)


def collate_bundles(bundles: Sequence[ConditioningBundle]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to the longest bundle. Returns (B, K, d) embeddings and a (B, K) key-valid mask."""
    kmax = max(b.K for b in bundles)
    d = bundles[0].dim
    for b in bundles:
        if b.dim != d:
            raise ConfigError("bundles in a batch disagree on embedding dim")
    valid = torch.zeros(len(bundles), kmax, dtype=torch.bool)
    rows = []
    for i, b in enumerate(bundles):
        pad = kmax - b.K
        rows.append(F.pad(b.embeddings, (0, 0, 0, pad)) if pad else b.embeddings)
        valid[i, : b.K] = True
    return torch.stack(rows), valid
