"""Tokenizer and compact self-attention text encoder."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor, nn

from .attention import FeedForward, MultiHeadCrossAttention

PAD = "<pad>"
UNK = "<unk>"
_WORD = re.compile(r"[a-z0-9]+")


def normalize(text: str) -> list[str]:
    """Lowercase and strip punctuation; hyphenated words split in two."""
    return _WORD.findall(text.lower())


def build_vocab(texts: Iterable[str]) -> tuple[str, ...]:
    words = sorted({w for t in texts for w in normalize(t)})
    return (PAD, UNK, *words)


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[:2]) != (PAD, UNK):
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        words = normalize(text)
        if not words:
            raise ValueError(f"prompt {text!r} is empty after normalization")
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in words]

    def batch(self, texts: Sequence[str]) -> tuple[Tensor, Tensor]:
        """Pad a list of prompts; returns ``(ids, mask)`` each of shape (B, T)."""
        encoded = [self.encode(t) for t in texts]
        t = max(len(e) for e in encoded)
        ids = torch.zeros(len(encoded), t, dtype=torch.long)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e)
        return ids, ids != 0


@dataclass
class LanguageFeatures:
    values: Tensor  # (B, T, C_l)
    mask: Tensor  # (B, T) bool, True on real tokens

    @property
    def num_tokens(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class TextLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, dim, dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, mask)
        return x + self.ffn(self.norm2(x))


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int, num_heads: int, max_len: int = 64, num_layers: int = 2):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.pos = nn.Embedding(max_len, dim)
        self.layers = nn.ModuleList(TextLayer(dim, num_heads) for _ in range(num_layers))
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.embed.weight, std=0.5)
        nn.init.normal_(self.pos.weight, std=0.02)
        with torch.no_grad():
            self.embed.weight[0].zero_()

    def forward(self, ids: Tensor, mask: Tensor) -> LanguageFeatures:
        if ids.shape[1] > self.max_len:
            raise ValueError(f"prompt longer than {self.max_len} tokens")
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.embed(ids) + self.pos(pos)[None]
        for layer in self.layers:
            x = layer(x, mask)
        return LanguageFeatures(self.norm(x), mask)
