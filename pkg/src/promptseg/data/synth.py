"""Deterministic synthetic instrument scenes.

Each class has a fixed polygon template (a shaft with a class-specific tip),
a base colour and a stripe frequency. A frame samples a subset of classes,
places each template with rotation/scale/translation jitter around a
class-specific position prior, and paints them in class order so later
classes occlude earlier ones.
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from matplotlib.path import Path as PolyPath

from ..prompts import DESCRIPTIONS, ENDOVIS2018, ClassLexicon
from ..types import DatasetRecord

# Local template frame: x runs along the shaft (tip at +x), y across it.
_SHAFT = [(-26, -3.5), (8, -3.5), (8, 3.5), (-26, 3.5)]
_TIPS = {
    0: [(8, -3.5), (16, -5), (18, -1), (12, 0), (18, 1), (16, 5), (8, 3.5)],       # forked jaws
    1: [(8, -3.5), (13, -7), (19, -6), (15, 0), (19, 6), (13, 7), (8, 3.5)],       # wide serrated jaws
    2: [(8, -4.5), (20, -4.5), (20, 4.5), (8, 4.5)],                                # blunt block
    3: [(8, -3.5), (15, -5), (21, -2), (18, 3), (8, 3.5)],                          # curved blade
    4: [(8, -3.5), (14, -5.5), (19, -3), (20, 0), (19, 3), (14, 5.5), (8, 3.5)],   # rounded probe
    5: [(8, -2), (20, -2), (20, 2), (8, 2)],                                        # thin tube
    6: [(8, -3.5), (18, -3), (21, 0), (18, 3), (8, 3.5)],                           # pointed applier
}
_COLOURS = [
    (0.85, 0.85, 0.90), (0.25, 0.30, 0.85), (0.95, 0.85, 0.15), (0.20, 0.75, 0.30),
    (0.10, 0.10, 0.12), (0.55, 0.20, 0.75), (0.10, 0.75, 0.80), (0.95, 0.55, 0.10),
    (0.60, 0.60, 0.60),
]
_STRIPES = [0.0, 0.25, 0.125, 0.0, 0.2, 0.1, 0.166, 0.143, 0.0]
_ANGLES = [30.0, 150.0, -30.0, -150.0, 90.0, -90.0, 0.0, 180.0, 45.0]
_CENTRES = [(18, 18), (18, 46), (46, 18), (46, 46), (20, 32), (44, 30), (32, 20), (32, 44), (30, 30)]
_PRESENCE = [0.45, 0.35, 0.3, 0.4, 0.2, 0.25, 0.15, 0.3, 0.3]


@dataclass(frozen=True)
class ClassTemplate:
    polygon: tuple[tuple[float, float], ...]
    colour: tuple[float, float, float]
    stripe_freq: float  # cycles per pixel along the shaft axis; 0 = plain
    angle: float  # base orientation in degrees
    centre: tuple[float, float]  # position prior mean (row, col) at 64x64


def default_templates(num_classes: int) -> tuple[ClassTemplate, ...]:
    if not 1 <= num_classes <= len(_COLOURS):
        raise ValueError(f"default templates cover 1..{len(_COLOURS)} classes")
    out = []
    for c in range(num_classes):
        tip = _TIPS.get(c, _TIPS[c % len(_TIPS)])
        poly = tuple(_SHAFT[:1]) + tuple((float(x), float(y)) for x, y in tip) + tuple(_SHAFT[3:])
        out.append(ClassTemplate(poly, _COLOURS[c], _STRIPES[c], _ANGLES[c], _CENTRES[c]))
    return tuple(out)


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 7
    image_size: int = 64
    max_instruments_per_frame: int = 3
    presence_probs: tuple[float, ...] = ()
    rotation_jitter: float = 20.0  # degrees, uniform +-
    scale_range: tuple[float, float] = (0.85, 1.15)
    translation_sigma: float = 5.0  # pixels at 64x64, Gaussian
    seed: int = 0
    templates: tuple[ClassTemplate, ...] = field(default=())

    def __post_init__(self):
        if not self.templates:
            object.__setattr__(self, "templates", default_templates(self.num_classes))
        if not self.presence_probs:
            object.__setattr__(self, "presence_probs", tuple(_PRESENCE[: self.num_classes]))
        object.__setattr__(self, "presence_probs", tuple(float(p) for p in self.presence_probs))
        if len(self.templates) != self.num_classes or len(self.presence_probs) != self.num_classes:
            raise ValueError("templates and presence_probs must have one entry per class")
        if any(not 0.0 <= p <= 1.0 for p in self.presence_probs):
            raise ValueError("presence probabilities must lie in [0, 1]")
        if self.max_instruments_per_frame < 0:
            raise ValueError("max_instruments_per_frame must be >= 0")
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")
        keys = {(t.polygon, t.colour, t.stripe_freq) for t in self.templates}
        if len(keys) != self.num_classes:
            raise ValueError("class appearance templates must be pairwise distinct")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "templates" in d:
            d["templates"] = tuple(
                ClassTemplate(tuple(map(tuple, t["polygon"])), tuple(t["colour"]), t["stripe_freq"],
                              t["angle"], tuple(t["centre"]))
                for t in d["templates"]
            )
        for k in ("presence_probs", "scale_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _background(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = np.array([0.72, 0.30, 0.28]) + rng.uniform(-0.05, 0.05, 3)
    field_ = np.zeros((n, n))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img = base[None, None, :] + 0.05 * field_[..., None] * np.array([1.0, 0.6, 0.6])
    return img


def _rasterize(poly: np.ndarray, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    pts = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    return PolyPath(poly).contains_points(pts).reshape(n, n)


def _keep_rate(q: np.ndarray, c: int, cap: int) -> float:
    """P(class c survives the cap | c drawn) for independent draws with probabilities q."""
    dist = np.array([1.0])  # distribution of the number of other classes drawn
    for j, qj in enumerate(q):
        if j != c:
            dist = np.append(dist * (1 - qj), 0.0) + np.insert(dist * qj, 0, 0.0)
    n = np.arange(len(dist)) + 1
    return float(np.sum(dist * np.minimum(1.0, cap / n)))


@functools.lru_cache(maxsize=64)
def draw_probs(probs: tuple[float, ...], cap: int) -> tuple[float, ...]:
    """Raw draw probabilities whose post-cap presence rates equal ``probs``.

    Fixed-point iteration on q_c = p_c / keep_c(q); clipped to [0, 1] when the
    target rates are not reachable under the cap.
    """
    p = np.asarray(probs, dtype=float)
    if cap <= 0:
        return tuple(0.0 for _ in probs)
    q = p.copy()
    for _ in range(200):
        keep = np.array([_keep_rate(q, c, cap) for c in range(len(q))])
        q_new = np.clip(p / keep, 0.0, 1.0)
        if np.max(np.abs(q_new - q)) < 1e-12:
            break
        q = q_new
    return tuple(float(x) for x in q_new)


def gen_scene(cfg: SynthConfig, frame_index: int) -> DatasetRecord:
    """Render frame ``frame_index``; a pure function of (cfg, frame_index)."""
    n = cfg.image_size
    k = n / 64.0
    rng = np.random.default_rng([cfg.seed, frame_index])
    img = _background(rng, n)

    q = draw_probs(tuple(cfg.presence_probs), cfg.max_instruments_per_frame)
    draws = rng.random(cfg.num_classes) < np.asarray(q)
    chosen = np.flatnonzero(draws)
    if len(chosen) > cfg.max_instruments_per_frame:
        chosen = np.sort(rng.choice(chosen, cfg.max_instruments_per_frame, replace=False))

    labels = np.zeros((n, n), dtype=np.int32)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    for c in chosen:
        t = cfg.templates[c]
        local = np.asarray(t.polygon, dtype=float)
        for _ in range(10):
            theta = np.deg2rad(t.angle + rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter))
            scale = rng.uniform(*cfg.scale_range) * k
            cy, cx = np.asarray(t.centre) * k + rng.normal(0, cfg.translation_sigma * k, 2)
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            # Image y grows downward; polygon vertices are (x, y) pairs.
            poly = local @ rot.T * scale + np.array([cx, cy])
            region = _rasterize(poly, n)
            if region.any():
                break
        else:
            continue
        u = ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / scale
        shade = np.ones((n, n))
        if t.stripe_freq > 0:
            shade = np.where(np.sin(2 * np.pi * t.stripe_freq * u) > 0, 1.0, 0.55)
        colour = np.asarray(t.colour)[None, None, :] * shade[..., None]
        img[region] = colour[region]
        labels[region] = c + 1

    img = img + rng.normal(0, 0.02, img.shape)
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    masks = {c: (labels == c + 1).astype(np.uint8) for c in range(cfg.num_classes)}
    return DatasetRecord(f"s{cfg.seed}-{frame_index:07d}", img.astype(np.float32), masks)


SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def gen_split(cfg: SynthConfig, split: str, size: int) -> list[DatasetRecord]:
    off = SPLIT_OFFSETS[split]
    return [gen_scene(cfg, off + i) for i in range(size)]


def synthetic_lexicon(num_classes: int) -> ClassLexicon:
    """EndoVis2018 names for the first seven classes, then the two EndoVis2017-only ones."""
    names = list(ENDOVIS2018.names.values()) + ["vessel sealer", "grasping retractor"]
    if not 1 <= num_classes <= len(names):
        raise ValueError(f"synthetic lexicon covers 1..{len(names)} classes")
    return ClassLexicon.from_rows((c, n, DESCRIPTIONS[n]) for c, n in enumerate(names[:num_classes]))
