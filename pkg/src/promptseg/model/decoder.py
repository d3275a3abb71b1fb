"""Top-down multi-scale decoder, mask head and existence head."""
from __future__ import annotations

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .attention import MultiHeadCrossAttention

EPS = 1e-7  # probabilities are kept inside [EPS, 1 - EPS]


def probability(logits: Tensor) -> Tensor:
    """Logistic, clamped so float32 rounding never yields exactly 0 or 1."""
    return torch.sigmoid(logits).clamp(EPS, 1 - EPS)


class PyramidDecoder(nn.Module):
    """Lateral 1x1 projections merged coarse-to-fine down to 1/4 scale."""

    def __init__(self, channels: list[int], dim: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.smooth = nn.ModuleList(nn.Conv2d(dim, dim, 3, padding=1) for _ in channels)
        self.mask_head = nn.Conv2d(dim, 1, 1)
        nn.init.zeros_(self.mask_head.weight)
        nn.init.zeros_(self.mask_head.bias)

    def forward(self, f: list[Tensor]) -> list[Tensor]:
        """Returns the pyramid ``[p1, p2, p3, p4]``; ``p1`` is the 1/4-scale pixel feature."""
        p = None
        out = []
        for i in reversed(range(len(f))):
            x = self.lateral[i](f[i])
            if p is not None:
                x = x + F.interpolate(p, size=x.shape[-2:], mode="nearest")
            p = F.gelu(self.smooth[i](x))
            out.append(p)
        return out[::-1]

    def mask_logits(self, pixel: Tensor, size: tuple[int, int]) -> Tensor:
        logits = self.mask_head(pixel)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)[:, 0]


POOLS = ("mean", "max")


class ExistenceHead(nn.Module):
    """Spatially pooled decoder feature attends to the prompt features; linear + logistic."""

    def __init__(self, dim: int, kv_dim: int, num_heads: int, pool: str = "mean"):
        super().__init__()
        if pool not in POOLS:
            raise ValueError(f"pool must be one of {POOLS}")
        self.pool = pool
        self.attn = MultiHeadCrossAttention(dim, kv_dim, dim, num_heads)
        self.norm = nn.LayerNorm(dim)
        self.classifier = nn.Linear(dim, 1)
        nn.init.zeros_(self.classifier.weight)
        nn.init.zeros_(self.classifier.bias)

    def logits(self, feature: Tensor, kv: Tensor, kv_mask: Tensor) -> Tensor:
        q = (feature.mean(dim=(2, 3)) if self.pool == "mean" else feature.amax(dim=(2, 3)))[:, None, :]
        y = self.norm(q + self.attn(q, kv, kv_mask))
        return self.classifier(y)[:, 0, 0]

    def forward(self, feature: Tensor, kv: Tensor, kv_mask: Tensor) -> Tensor:
        return probability(self.logits(feature, kv, kv_mask))
