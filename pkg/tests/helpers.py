"""Small models and datasets shared by the slower tests."""
from __future__ import annotations

import torch

from promptseg.data import SynthConfig, gen_split
from promptseg.model import ModelConfig, PromptSegmenter
from promptseg.prompts import ENDOVIS2018

TINY = dict(base_channels=8, text_dim=8, fusion_dim=8, decoder_dim=8, num_heads=2, language_token_count=4)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig.for_lexicon(ENDOVIS2018, **{**TINY, **kw})


def perturbed_model(seed: int = 0, **kw) -> PromptSegmenter:
    """Untrained tiny model with non-zero heads, so gates and masks vary across prompts."""
    torch.manual_seed(seed)
    m = PromptSegmenter(tiny_config(**kw))
    with torch.no_grad():
        for p in (m.existence.classifier.weight, m.decoder.mask_head.weight):
            p.normal_(0, 3.0)
    return m.eval()


def frames(n: int, split: str = "val", seed: int = 0):
    return gen_split(SynthConfig(seed=seed), split, n)
