"""Shared domain types and elementary mask arithmetic.

Masks are plain numpy arrays: ``BinaryMask`` is ``uint8`` in {0, 1},
``ProbMask`` is floating point in [0, 1], ``LabeledMask`` is an integer image
where 0 is background and ``k`` marks class ``k - 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

# Probability threshold used for mask binarization and existence gating (>= rule).
THRESHOLD = 0.5


class Quadrant(str, enum.Enum):
    LEFT_TOP = "left-top"
    LEFT_BOTTOM = "left-bottom"
    RIGHT_TOP = "right-top"
    RIGHT_BOTTOM = "right-bottom"

    @property
    def phrase(self) -> str:
        """Rendering used inside prompt text, e.g. ``"right bottom"``."""
        return self.value.replace("-", " ")

    @classmethod
    def from_sides(cls, left: bool, top: bool) -> "Quadrant":
        if left:
            return cls.LEFT_TOP if top else cls.LEFT_BOTTOM
        return cls.RIGHT_TOP if top else cls.RIGHT_BOTTOM


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an ``H x W x 3`` image in [0, 1] with sides divisible by 32."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ValueError(f"image sides must be >= 32 and divisible by 32, got {h}x{w}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must be finite and in [0, 1]")
    return image


def binarize(m: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(m) >= threshold).astype(np.uint8)


def center_of_mass(m: np.ndarray) -> tuple[float, float]:
    """Mean (row, col) of the foreground pixels of a binary mask."""
    rows, cols = np.nonzero(np.asarray(m))
    if rows.size == 0:
        raise EmptyMaskError("center of mass of an empty mask is undefined")
    return float(rows.mean()), float(cols.mean())


def to_labeled(masks: Mapping[int, np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Per-class disjoint binary masks to a labeled image (class k -> k + 1)."""
    out = np.zeros(shape, dtype=np.int32)
    for c in sorted(masks):
        m = np.asarray(masks[c]).astype(bool)
        if np.any(out[m] != 0):
            raise ValueError(f"class {c} overlaps an earlier class")
        out[m] = c + 1
    return out


def from_labeled(labeled: np.ndarray, num_classes: int) -> dict[int, np.ndarray]:
    labeled = np.asarray(labeled)
    if labeled.min() < 0 or labeled.max() > num_classes:
        raise ValueError("label values out of range")
    return {c: (labeled == c + 1).astype(np.uint8) for c in range(num_classes)}


@dataclass(frozen=True)
class DatasetRecord:
    """One frame: image, per-class ground-truth masks and the present-class set."""

    frame_id: str
    image: np.ndarray
    gt_masks: Mapping[int, np.ndarray]
    present: frozenset[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        image = check_image(self.image)
        shape = image.shape[:2]
        present = set()
        cover = np.zeros(shape, dtype=np.int32)
        for c, m in self.gt_masks.items():
            if m.shape != shape:
                raise ValueError(f"mask for class {c} has shape {m.shape}, image is {shape}")
            if m.any():
                present.add(c)
            cover += m.astype(bool)
        if cover.max(initial=0) > 1:
            raise ValueError(f"frame {self.frame_id}: ground-truth masks overlap")
        if self.present is None:
            object.__setattr__(self, "present", frozenset(present))
        elif set(self.present) != present:
            raise ValueError(f"frame {self.frame_id}: present set disagrees with masks")
        else:
            object.__setattr__(self, "present", frozenset(self.present))

    @property
    def num_classes(self) -> int:
        return len(self.gt_masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]
