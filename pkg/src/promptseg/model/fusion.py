"""Per-stage vision-language fusion (MMFB) and the selective gate (SGB)."""
from __future__ import annotations

import torch
from torch import Tensor, nn

from .attention import MultiHeadCrossAttention


class MultiModalFusionBlock(nn.Module):
    """Fuses a stage's visual tokens with the prompt features.

    Both inputs are projected to a shared width. Learnable language tokens
    first attend to the projected prompt features; the visual tokens then
    attend to those refined tokens, and the result is projected back to the
    stage width. Without language tokens the visual tokens attend to the
    projected prompt directly.
    """

    def __init__(self, channels: int, text_dim: int, dim: int, num_heads: int,
                 num_tokens: int = 20, use_language_tokens: bool = True):
        super().__init__()
        self.use_language_tokens = use_language_tokens
        self.v_proj = nn.Linear(channels, dim)
        self.v_norm = nn.LayerNorm(dim)
        self.l_proj = nn.Linear(text_dim, dim)
        self.l_norm = nn.LayerNorm(dim)
        if use_language_tokens:
            self.tokens = nn.Parameter(torch.randn(num_tokens, dim) * 0.02)
            self.token_attn = MultiHeadCrossAttention(dim, dim, dim, num_heads)
            self.token_norm = nn.LayerNorm(dim)
        self.visual_attn = MultiHeadCrossAttention(dim, dim, dim, num_heads)
        self.out_proj = nn.Linear(dim, channels)

    def refine_language(self, l: Tensor, l_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Keys/values for the visual attention, with their validity mask."""
        lp = self.l_norm(self.l_proj(l))
        if not self.use_language_tokens:
            return lp, l_mask
        q = self.tokens.expand(l.shape[0], -1, -1)
        refined = self.token_norm(q + self.token_attn(q, lp, l_mask))
        return refined, torch.ones(refined.shape[:2], dtype=torch.bool, device=l.device)

    def forward(self, v: Tensor, l: Tensor, l_mask: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``v`` is (B, N, C) visual tokens; returns fused (B, N, C) plus the language keys."""
        kv, kv_mask = self.refine_language(l, l_mask)
        y = self.visual_attn(self.v_norm(self.v_proj(v)), kv, kv_mask)
        return self.out_proj(y), kv, kv_mask


class SelectiveGate(nn.Module):
    """Elementwise logistic gate computed from the fused features themselves."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.constant_(self.fc2.bias, 1.0)
        # Test hook: a float here replaces the computed gate.
        self.force_gate: float | None = None

    def gate(self, x: Tensor) -> Tensor:
        if self.force_gate is not None:
            return torch.full_like(x, float(self.force_gate))
        return torch.sigmoid(self.fc2(nn.functional.gelu(self.fc1(x))))

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(x) * x
