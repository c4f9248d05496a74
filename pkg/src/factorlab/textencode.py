"""Vocabulary, multi-vector factor tokens, prompt assembly and the frozen text encoder."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from . import words
from .factorspace import CATEGORIES, FactorRegistry, FactorTuple

L_MAX = 77


class PromptOverflowError(ValueError):
    pass


class PromptError(ValueError):
    pass


class Stage(str, enum.Enum):
    S1 = "S1"
    S2 = "S2"
    INFERENCE = "inference"


def general_token(category: str, value: str) -> str:
    return f"<{category}:{value}>"


def specific_token(category: str, value: str, dataset_id: str) -> str:
    return f"<{category}:{value}@{dataset_id}>"


@dataclass
class Vocabulary:
    """Content words (fixed ids) plus general and specific factor tokens for a registry."""

    general: dict[tuple[str, str], int] = field(default_factory=dict)
    specific: dict[tuple[str, str, str], int] = field(default_factory=dict)

    @classmethod
    def for_registry(cls, registry: FactorRegistry) -> "Vocabulary":
        next_id = len(words.WORDS)
        general, specific = {}, {}
        for cat in CATEGORIES:
            for value in registry.values(cat):
                general[(cat, value)] = next_id
                next_id += 1
        for d in registry.datasets:
            for cat in CATEGORIES:
                for value in d.allowed(cat):
                    specific[(cat, value, d.id)] = next_id
                    next_id += 1
        return cls(general, specific)

    @property
    def content_size(self) -> int:
        return len(words.WORDS)

    def manifest(self) -> dict:
        return {
            "content": {w: i for i, w in enumerate(words.WORDS)},
            "general": {general_token(c, v): i for (c, v), i in self.general.items()},
            "specific": {specific_token(c, v, d): i for (c, v, d), i in self.specific.items()},
        }

    def write_manifest(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.manifest(), fh, indent=1, sort_keys=True)


@dataclass(frozen=True)
class FactorSlot:
    category: str
    value: str
    dataset: str | None = None  # None selects the general token

    @property
    def key(self):
        return (self.category, self.value) if self.dataset is None else (self.category, self.value, self.dataset)


@dataclass(frozen=True)
class PromptSpec:
    slots: tuple[FactorSlot, ...]
    caption: tuple[int, ...]
    n: int
    stage: Stage = Stage.S1

    @property
    def length(self) -> int:
        return len(self.slots) * self.n + len(self.caption)


def assemble_prompt(
    t: FactorTuple,
    caption: Sequence[int],
    n: int,
    stage: Stage | str = Stage.S1,
    specific_map: Mapping[str, str] | None = None,
) -> PromptSpec:
    """Factor slots in category order, then the caption. Overflow is an error, never truncation."""
    stage = Stage(stage)
    specific_map = dict(specific_map or {})
    unknown = set(specific_map) - set(CATEGORIES)
    if unknown:
        raise PromptError(f"unknown categories in specific map: {sorted(unknown)}")
    if stage is Stage.S1 and specific_map:
        raise PromptError("stage-1 prompts use general tokens only")
    if stage is Stage.S2 and len(specific_map) != 1:
        raise PromptError("stage-2 prompts bind exactly one category to a specific token")
    if n < 1:
        raise PromptError("n must be >= 1")
    length = len(CATEGORIES) * n + len(caption)
    if length > L_MAX:
        raise PromptOverflowError(
            f"prompt needs {len(CATEGORIES)}*{n} + {len(caption)} = {length} > {L_MAX} positions; shorten the caption or n"
        )
    slots = tuple(FactorSlot(c, t[c], specific_map.get(c)) for c in CATEGORIES)
    return PromptSpec(slots, tuple(int(i) for i in caption), n, stage)


@dataclass
class FactorEmbedding:
    """n x d multi-vector behind one factor token."""

    vectors: torch.Tensor

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("factor embedding is an n x d matrix with n >= 1")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = len(words.WORDS)
    dim: int = 64
    heads: int = 4
    n_encoders: int = 1
    max_len: int = L_MAX

    @property
    def cond_dim(self) -> int:
        return self.dim * self.n_encoders


class _EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.ln_out = nn.LayerNorm(dim)

    def forward(self, x):
        b, length, dim = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, length, 3, self.heads, dim // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dim // self.heads), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, length, dim))
        x = x + self.mlp(self.ln2(x))
        return self.ln_out(x)


class _SingleEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.token = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.position = nn.Parameter(torch.zeros(cfg.max_len, cfg.dim))
        nn.init.normal_(self.token.weight, std=0.2)
        nn.init.normal_(self.position, std=0.05)
        self.layer = _EncoderLayer(cfg.dim, cfg.heads)

    def forward(self, rows):
        return self.layer(rows + self.position[: rows.shape[1]])


class TextEncoder(nn.Module):
    """Embedding table + one self-attention layer per encoder; outputs are concatenated.

    ``encode_rows`` takes already-expanded embedding rows (B x L x E*d), pads them
    to ``max_len`` with the pad embedding and returns the conditioning sequence.
    """

    def __init__(self, cfg: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoders = nn.ModuleList(_SingleEncoder(cfg) for _ in range(cfg.n_encoders))

    def word_rows(self, token_ids) -> torch.Tensor:
        """Embedding rows for content-word ids, all encoders concatenated (L x E*d)."""
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        return torch.cat([enc.token(ids) for enc in self.encoders], dim=-1)

    def pad_rows(self, rows: Sequence[torch.Tensor]) -> torch.Tensor:
        pad = self.word_rows([words.PAD_ID])
        out = []
        for r in rows:
            if r.shape[0] > self.cfg.max_len:
                raise PromptOverflowError(f"{r.shape[0]} rows exceed {self.cfg.max_len}")
            out.append(torch.cat([r, pad.expand(self.cfg.max_len - r.shape[0], -1)], dim=0))
        return torch.stack(out)

    def encode_rows(self, rows: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self.pad_rows(rows)
        d = self.cfg.dim
        return torch.cat([enc(x[..., i * d:(i + 1) * d]) for i, enc in enumerate(self.encoders)], dim=-1)

    def encode_words(self, batch_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        return self.encode_rows([self.word_rows(ids) if len(ids) else self.word_rows([])[:0] for ids in batch_ids])

    def null_conditioning(self) -> torch.Tensor:
        """Conditioning of the empty prompt (all padding); 1 x L_max x E*d."""
        return self.encode_words([[]])


def init_factor_token(word: str, n: int, encoder: TextEncoder) -> FactorEmbedding:
    """n identical copies of the frozen embedding of ``word``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    row = encoder.word_rows([words.word_id(word)]).detach()
    return FactorEmbedding(row.repeat(n, 1).clone())


def prompt_rows(prompt: PromptSpec, tables: Mapping, encoder: TextEncoder) -> torch.Tensor:
    """Expand a prompt: each factor slot to its n rows, caption ids to frozen word rows."""
    parts = []
    for slot in prompt.slots:
        try:
            emb = tables[slot.key]
        except KeyError:
            raise PromptError(f"no embedding for factor token {slot.key}") from None
        vec = emb.vectors if isinstance(emb, FactorEmbedding) else emb
        if vec.shape[0] != prompt.n:
            raise PromptError(f"token {slot.key} has {vec.shape[0]} vectors, prompt expects {prompt.n}")
        parts.append(vec)
    parts.append(encoder.word_rows(prompt.caption))
    return torch.cat(parts, dim=0)


def encode_prompts(prompts: Sequence[PromptSpec], tables: Mapping, encoder: TextEncoder) -> torch.Tensor:
    return encoder.encode_rows([prompt_rows(p, tables, encoder) for p in prompts])


def encode_prompt(prompt: PromptSpec, tables: Mapping, encoder: TextEncoder) -> torch.Tensor:
    """Single prompt -> L_max x E*d conditioning sequence."""
    return encode_prompts([prompt], tables, encoder)[0]


def zeroshot_words(t: FactorTuple) -> list[int]:
    """Factor names as plain caption words, in category order."""
    return words.ids(t[c] for c in CATEGORIES)
