"""Four-stage visual encoder with language fusion between stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .attention import FeedForward
from .fusion import MultiModalFusionBlock, SelectiveGate


class MixingLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim)
        for lin in (self.ffn.fc1, self.ffn.fc2):
            bound = 1.0 / lin.in_features ** 0.5
            nn.init.uniform_(lin.weight, -bound, bound)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.ffn(self.norm(x))


class Stage(nn.Module):
    """Strided patch embedding followed by two token-wise MLP mixing layers."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, out_channels, kernel_size=stride, stride=stride)
        self.norm = nn.LayerNorm(out_channels)
        self.mix = nn.Sequential(MixingLayer(out_channels), MixingLayer(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        """(B, C_in, H, W) -> tokens (B, H', W', C_out)."""
        y = self.embed(x).permute(0, 2, 3, 1)
        return self.mix(self.norm(y))


@dataclass
class StageFeatures:
    f: list[Tensor]  # fused outputs, each (B, C_i, H_i, W_i)
    v: list[Tensor]  # pre-fusion visual features, same shapes
    lang: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # per-stage (keys, mask)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(x.shape[1:]) for x in self.f]


class FusionEncoder(nn.Module):
    def __init__(self, base_channels: int, text_dim: int, fusion_dim: int, num_heads: int,
                 num_tokens: int, use_mmfb: bool = True, use_sgb: bool = True,
                 use_language_tokens: bool = True):
        super().__init__()
        self.channels = [base_channels * 2 ** i for i in range(4)]
        self.use_mmfb = use_mmfb
        self.use_sgb = use_sgb and use_mmfb
        ins = [3] + self.channels[:3]
        self.stages = nn.ModuleList(
            Stage(cin, cout, 4 if i == 0 else 2) for i, (cin, cout) in enumerate(zip(ins, self.channels))
        )
        self.dims = [min(c, fusion_dim) for c in self.channels]
        if use_mmfb:
            self.mmfb = nn.ModuleList(
                MultiModalFusionBlock(c, text_dim, d, num_heads, num_tokens, use_language_tokens)
                for c, d in zip(self.channels, self.dims)
            )
        if self.use_sgb:
            self.sgb = nn.ModuleList(SelectiveGate(c) for c in self.channels)

    def forward(self, image: Tensor, l: Tensor, l_mask: Tensor) -> StageFeatures:
        out = StageFeatures([], [])
        f = image
        for i, stage in enumerate(self.stages):
            v = stage(f)
            if self.use_mmfb:
                b, h, w, c = v.shape
                fused, kv, kv_mask = self.mmfb[i](v.reshape(b, h * w, c), l, l_mask)
                fused = fused.view(b, h, w, c)
                if self.use_sgb:
                    fused = self.sgb[i](fused)
                out.lang.append((kv, kv_mask))
                fi = v + fused
            else:
                fi = v
            f = fi.permute(0, 3, 1, 2)
            out.v.append(v.permute(0, 3, 1, 2))
            out.f.append(f)
        return out
