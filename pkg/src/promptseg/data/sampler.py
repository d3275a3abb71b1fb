from __future__ import annotations

from collections import Counter
from typing import Iterator, Sequence

import numpy as np


def frame_weights(presence: Sequence[frozenset[int] | set[int]]) -> np.ndarray:
    """Inverse-frequency weight per frame: max over its classes of 1 / class frame count.

    Frames without instruments get the smallest positive weight.
    """
    if not presence:
        raise ValueError("cannot sample from an empty dataset")
    counts = Counter(c for p in presence for c in p)
    w = np.array([max((1.0 / counts[c] for c in p), default=0.0) for p in presence])
    positive = w[w > 0]
    w[w == 0] = positive.min() if positive.size else 1.0
    return w


def balanced_sampler(frame_ids: Sequence[str], presence: Sequence[frozenset[int]], seed: int,
                     chunk: int = 4096) -> Iterator[str]:
    """Infinite, seed-deterministic stream of frame ids drawn with inverse-frequency weights."""
    if len(frame_ids) != len(presence):
        raise ValueError("frame_ids and presence differ in length")
    w = frame_weights(presence)
    p = w / w.sum()
    rng = np.random.default_rng(seed)
    while True:
        for i in rng.choice(len(frame_ids), size=chunk, p=p):
            yield frame_ids[i]
