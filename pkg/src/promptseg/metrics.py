"""Segmentation and presence metrics for the all-classes-prompted protocol.

Challenge IoU averages over the ground-truth-present classes of each frame;
ISI IoU averages over present-or-predicted classes, so false-positive classes
count as zero; mean-class IoU pools pixel counts per class over the dataset.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class FrameEval:
    frame_id: str
    pred: Mapping[int, np.ndarray]
    gt: Mapping[int, np.ndarray]
    # Per-class existence decision, used by the existence-prob presence mode.
    pred_exists: Mapping[int, bool] | None = None

    def __post_init__(self):
        if set(self.pred) != set(self.gt):
            raise ValueError(f"frame {self.frame_id}: prediction and GT class sets differ")
        shapes = {np.shape(m) for m in (*self.pred.values(), *self.gt.values())}
        if len(shapes) > 1:
            raise ValueError(f"frame {self.frame_id}: mask dims differ {shapes}")

    @property
    def classes(self) -> list[int]:
        return sorted(self.gt)

    def gt_present(self) -> set[int]:
        return {c for c, m in self.gt.items() if np.any(m)}

    def pred_present(self) -> set[int]:
        return {c for c, m in self.pred.items() if np.any(m)}


def _mean(values) -> float:
    # Correctly rounded sum, so the result does not depend on summation order.
    return math.fsum(values) / len(values)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def challenge_iou(frames: Sequence[FrameEval]) -> float:
    scores = []
    for fr in frames:
        present = fr.gt_present()
        if present:
            scores.append(_mean([binary_iou(fr.pred[c], fr.gt[c]) for c in sorted(present)]))
    if not scores:
        raise ValueError("no frame contains a ground-truth instrument")
    return _mean(scores)


def isi_iou(frames: Sequence[FrameEval]) -> float:
    scores = []
    for fr in frames:
        classes = fr.gt_present() | fr.pred_present()
        if classes:
            scores.append(_mean([binary_iou(fr.pred[c], fr.gt[c]) for c in sorted(classes)]))
    if not scores:
        raise ValueError("every frame is empty in both prediction and ground truth")
    return _mean(scores)


def mc_iou(frames: Sequence[FrameEval]) -> tuple[float, dict[int, float]]:
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    for fr in frames:
        for c in fr.classes:
            p = np.asarray(fr.pred[c]).astype(bool)
            g = np.asarray(fr.gt[c]).astype(bool)
            u = np.count_nonzero(p | g)
            if u:
                inter[c] = inter.get(c, 0) + np.count_nonzero(p & g)
                union[c] = union.get(c, 0) + u
    if not union:
        raise ValueError("no class appears in any prediction or ground truth")
    per_class = {c: inter[c] / union[c] for c in sorted(union)}
    return _mean(list(per_class.values())), per_class


@dataclass
class PresenceCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "PresenceCounts") -> "PresenceCounts":
        return PresenceCounts(self.tp + other.tp, self.fp + other.fp,
                              self.tn + other.tn, self.fn + other.fn)

    def rates(self) -> dict[str, float]:
        fpr = self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0
        precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return {"fpr": fpr, "precision": precision, "recall": recall, "f1": f1}


def presence_counts(frames: Iterable[FrameEval], gate_mode: str = "mask-nonempty") -> dict[int, PresenceCounts]:
    """Per-class confusion counts over (frame, class) pairs."""
    if gate_mode not in ("mask-nonempty", "existence-prob"):
        raise ValueError(f"unknown gate mode {gate_mode!r}")
    counts: dict[int, PresenceCounts] = {}
    for fr in frames:
        if gate_mode == "existence-prob" and fr.pred_exists is None:
            raise ValueError(f"frame {fr.frame_id}: existence-prob mode needs existence decisions")
        for c in fr.classes:
            gt = bool(np.any(fr.gt[c]))
            if gate_mode == "mask-nonempty":
                pred = bool(np.any(fr.pred[c]))
            else:
                pred = bool(fr.pred_exists[c])
            k = counts.setdefault(c, PresenceCounts())
            if pred and gt:
                k.tp += 1
            elif pred:
                k.fp += 1
            elif gt:
                k.fn += 1
            else:
                k.tn += 1
    return counts


def presence_metrics(frames: Sequence[FrameEval], gate_mode: str = "mask-nonempty",
                     macro: bool = False) -> dict:
    """TP/FP/TN/FN with FPR, precision, recall and F1.

    Micro-averaged over (frame, class) pairs by default; ``macro=True``
    averages the per-class rates instead (counts are still totals).
    """
    per_class = presence_counts(frames, gate_mode)
    total = sum(per_class.values(), PresenceCounts())
    if macro and per_class:
        rates = [per_class[c].rates() for c in sorted(per_class)]
        derived = {k: _mean([r[k] for r in rates]) for k in rates[0]}
    else:
        derived = total.rates()
    return {"tp": total.tp, "fp": total.fp, "tn": total.tn, "fn": total.fn, **derived}


@dataclass
class EvalReport:
    ch_iou: float
    isi_iou: float
    mc_iou: float
    per_class_iou: dict[int, float]
    tp: int
    fp: int
    tn: int
    fn: int
    fpr: float
    precision: float
    recall: float
    f1: float
    num_frames: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ValueError(f"report schema version {version}, expected {SCHEMA_VERSION}")
        d["per_class_iou"] = {int(k): v for k, v in d["per_class_iou"].items()}
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, class_names: Mapping[int, str] | None = None) -> str:
        lines = [
            f"{'metric':<12} {'value':>8}",
            f"{'Ch IoU':<12} {self.ch_iou:8.4f}",
            f"{'ISI IoU':<12} {self.isi_iou:8.4f}",
            f"{'mc IoU':<12} {self.mc_iou:8.4f}",
            f"{'FPR':<12} {self.fpr:8.4f}",
            f"{'Precision':<12} {self.precision:8.4f}",
            f"{'Recall':<12} {self.recall:8.4f}",
            f"{'F1':<12} {self.f1:8.4f}",
            f"presence counts: TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn}",
        ]
        for c, v in sorted(self.per_class_iou.items()):
            name = class_names[c] if class_names else f"class {c}"
            lines.append(f"  {name:<28} {v:8.4f}")
        return "\n".join(lines)


def evaluate_frames(frames: Sequence[FrameEval], gate_mode: str = "mask-nonempty",
                    macro: bool = False, label: str = "") -> EvalReport:
    mc, per_class = mc_iou(frames)
    presence = presence_metrics(frames, gate_mode, macro)
    return EvalReport(
        ch_iou=challenge_iou(frames),
        isi_iou=isi_iou(frames),
        mc_iou=mc,
        per_class_iou=per_class,
        num_frames=len(frames),
        label=label,
        **presence,
    )
