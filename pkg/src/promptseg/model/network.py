"""The promptable segmenter: text encoder, fusion encoder, decoder and existence branch."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from ..prompts import ClassLexicon, PromptText
from ..types import Quadrant, check_image
from .decoder import EPS, POOLS, ExistenceHead, PyramidDecoder, probability
from .encoder import FusionEncoder, StageFeatures
from .text import LanguageFeatures, TextEncoder, Tokenizer, build_vocab


@dataclass(frozen=True)
class ModelConfig:
    vocab: tuple[str, ...] = ()
    base_channels: int = 16  # desk default sized for a 30-minute single-core run
    num_heads: int = 4
    language_token_count: int = 20
    text_dim: int = 64
    fusion_dim: int = 64
    decoder_dim: int = 32
    max_prompt_len: int = 64
    lam: float = 1.0
    use_mmfb: bool = True
    use_sgb: bool = True
    use_raw_language: bool = True
    use_language_tokens: bool = True
    existence_level: int = 1  # pyramid level (1 = finest) pooled into the existence query
    existence_pool: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        for name in ("base_channels", "text_dim", "fusion_dim", "decoder_dim"):
            if getattr(self, name) % self.num_heads:
                raise ValueError(f"{name}={getattr(self, name)} not divisible by num_heads={self.num_heads}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.existence_level not in (1, 2, 3, 4) or self.existence_pool not in POOLS:
            raise ValueError(f"existence query needs a level in 1..4 and a pool in {POOLS}")
        if self.language_token_count < 1:
            raise ValueError("language_token_count must be >= 1")

    @classmethod
    def for_lexicon(cls, lex: ClassLexicon, **kw) -> "ModelConfig":
        return cls(vocab=vocab_for_lexicon(lex), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def vocab_for_lexicon(lex: ClassLexicon) -> tuple[str, ...]:
    texts = [f"The {n} on the" for n in lex.names.values()]
    texts += list(lex.descriptions.values()) + [q.phrase for q in Quadrant]
    return build_vocab(texts)


@dataclass
class ClassPrediction:
    mask: np.ndarray  # (H, W) probabilities
    existence: float


@dataclass
class Outputs:
    mask_logits: Tensor  # (B, H, W)
    exist_logits: Tensor  # (B,)
    language: LanguageFeatures
    stages: StageFeatures
    pyramid: list[Tensor] = field(default_factory=list)

    @property
    def mask(self) -> Tensor:
        return probability(self.mask_logits)

    @property
    def existence(self) -> Tensor:
        return probability(self.exist_logits)


class PromptSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if not cfg.vocab:
            raise ValueError("model config needs a vocabulary")
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.vocab)
        self.text = TextEncoder(len(self.tokenizer), cfg.text_dim, cfg.num_heads, cfg.max_prompt_len)
        self.encoder = FusionEncoder(
            cfg.base_channels, cfg.text_dim, cfg.fusion_dim, cfg.num_heads,
            cfg.language_token_count, cfg.use_mmfb, cfg.use_sgb, cfg.use_language_tokens,
        )
        self.decoder = PyramidDecoder(self.encoder.channels, cfg.decoder_dim)
        raw = cfg.use_raw_language or not cfg.use_mmfb
        kv_dim = cfg.text_dim if raw else self.encoder.dims[-1]
        self.existence = ExistenceHead(cfg.decoder_dim, kv_dim, cfg.num_heads, cfg.existence_pool)

    def encode_text(self, prompts: Sequence[str | PromptText]) -> LanguageFeatures:
        texts = [p.text if isinstance(p, PromptText) else p for p in prompts]
        device = next(self.parameters()).device
        ids, mask = self.tokenizer.batch(texts)
        return self.text(ids.to(device), mask.to(device))

    def forward(self, images: Tensor, prompts: Sequence[str | PromptText]) -> Outputs:
        """``images`` is (B, 3, H, W); one prompt per image."""
        if images.shape[0] != len(prompts):
            raise ValueError(f"{images.shape[0]} images but {len(prompts)} prompts")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image sides must be divisible by 32, got {h}x{w}")
        lang = self.encode_text(prompts)
        stages = self.encoder(images, lang.values, lang.mask)
        pyramid = self.decoder(stages.f)
        mask_logits = self.decoder.mask_logits(pyramid[0], (h, w))
        if self.cfg.use_raw_language or not self.cfg.use_mmfb:
            kv, kv_mask = lang.values, lang.mask
        else:
            kv, kv_mask = stages.lang[-1]
        exist_logits = self.existence.logits(pyramid[self.cfg.existence_level - 1], kv, kv_mask)
        return Outputs(mask_logits, exist_logits, lang, stages, pyramid)

    @torch.no_grad()
    def predict(self, images: np.ndarray | Tensor, prompts: Sequence[str | PromptText],
                batch_size: int = 64) -> list[ClassPrediction]:
        """Inference on HxWx3 numpy images (or a single image shared by all prompts)."""
        was_training = self.training
        self.eval()
        x = images_to_tensor(images, len(prompts), next(self.parameters()).dtype)
        out = []
        for s in range(0, len(prompts), batch_size):
            o = self(x[s:s + batch_size], prompts[s:s + batch_size])
            masks = o.mask.cpu().numpy()
            exist = o.existence.cpu().numpy()
            out.extend(ClassPrediction(m, float(p)) for m, p in zip(masks, exist))
        self.train(was_training)
        return out


def images_to_tensor(images, count: int | None = None, dtype=torch.float32) -> Tensor:
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        check_image(arr)
        arr = np.broadcast_to(arr, (count or 1, *arr.shape))
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return x.to(dtype)


def bce(p: Tensor, y: Tensor) -> Tensor:
    p = p.clamp(EPS, 1 - EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def segmentation_loss(p: Tensor, y: Tensor, mask: Tensor, mask_gt: Tensor, lam: float) -> Tensor:
    """Existence BCE plus ``lam`` times the mean per-pixel mask BCE, averaged over the batch.

    ``p``/``y`` have shape (B,), ``mask``/``mask_gt`` shape (B, H, W). Negative
    samples carry all-zero ``mask_gt``.
    """
    if mask.shape != mask_gt.shape or p.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(mask.shape)} vs {tuple(mask_gt.shape)}")
    y = y.to(p.dtype)
    exist_term = bce(p, y)
    mask_term = bce(mask, mask_gt.to(mask.dtype)).flatten(1).mean(1)
    return (exist_term + lam * mask_term).mean()
