from __future__ import annotations

import math

import torch
from torch import Tensor, nn


class MultiHeadCrossAttention(nn.Module):
    """Multi-head attention with queries from one sequence and keys/values from another.

    ``kv_mask`` is a ``(B, Nk)`` boolean tensor, True where a key is valid.
    Masked keys receive exactly zero weight.
    """

    def __init__(self, q_dim: int, kv_dim: int, dim: int, num_heads: int, out_dim: int | None = None):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"attention dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(q_dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, out_dim or dim)

    def forward(self, q: Tensor, kv: Tensor, kv_mask: Tensor | None = None) -> Tensor:
        b, nq, _ = q.shape
        _, nk, _ = kv.shape
        h, d = self.num_heads, self.head_dim
        qh = self.q_proj(q).view(b, nq, h, d).transpose(1, 2)
        kh = self.k_proj(kv).view(b, nk, h, d).transpose(1, 2)
        vh = self.v_proj(kv).view(b, nk, h, d).transpose(1, 2)

        score = qh @ kh.transpose(-1, -2) / math.sqrt(d)
        if kv_mask is not None:
            score = score.masked_fill(~kv_mask[:, None, None, :], torch.finfo(score.dtype).min)
        attn = torch.softmax(score, dim=-1)
        if kv_mask is not None:
            attn = attn * kv_mask[:, None, None, :]

        y = (attn @ vh).transpose(1, 2).reshape(b, nq, h * d)
        return self.out_proj(y)


class FeedForward(nn.Module):
    """Position-wise two-layer MLP."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))
