"""Two-pass inference with existence gating and location-prompt refinement.

Per class, the first pass runs the name and description prompts. If their
mean existence probability reaches 0.5 a location prompt is built from the
first-pass maps and run as a second pass; the maps are then combined:

    mean(p1, p2) <  0.5               -> all-zero map
    mean(p1, p2) >= 0.5 and p3 <  0.5 -> (M1 + M2) / 2
    mean(p1, p2) >= 0.5 and p3 >= 0.5 -> (M1 + M2 + M3) / 3
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .prompts import (
    ClassLexicon,
    PromptKind,
    PromptText,
    description_prompt,
    location_prompt,
    name_prompt,
    quadrant_of,
)
from .types import THRESHOLD, Quadrant, binarize

# A runner maps (image, prompts) to one (mask, existence) pair per prompt.
Runner = Callable[[np.ndarray, Sequence[PromptText]], Sequence[tuple[np.ndarray, float]]]


class Branch(str, enum.Enum):
    ABSENT = "absent"
    NO_CONFIRM = "no_confirm"
    CONFIRMED = "confirmed"
    UNGATED = "ungated"


@dataclass(frozen=True)
class RefineOptions:
    use_description: bool = True
    use_refinement: bool = True
    gated: bool = True

    def first_kinds(self) -> tuple[PromptKind, ...]:
        if self.use_description:
            return (PromptKind.NAME, PromptKind.DESCRIPTION)
        return (PromptKind.NAME,)


@dataclass
class RefinementTrace:
    class_id: int
    first_probs: list[float]
    branch: Branch
    p3: float | None = None
    quadrant: Quadrant | None = None
    frame_id: str = ""
    first_maps: list[np.ndarray] = field(default_factory=list, repr=False)
    m3: np.ndarray | None = field(default=None, repr=False)

    @property
    def p1(self) -> float:
        return self.first_probs[0]

    @property
    def p2(self) -> float | None:
        return self.first_probs[1] if len(self.first_probs) > 1 else None

    @property
    def gate_prob(self) -> float:
        return float(np.mean(self.first_probs))

    def to_json(self) -> str:
        return json.dumps({
            "frame_id": self.frame_id,
            "class_id": self.class_id,
            "p1": self.p1,
            "p2": self.p2,
            "p3": self.p3,
            "quadrant": self.quadrant.value if self.quadrant else None,
            "branch": self.branch.value,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RefinementTrace":
        d = json.loads(line)
        probs = [d["p1"]] + ([d["p2"]] if d["p2"] is not None else [])
        return cls(d["class_id"], probs, Branch(d["branch"]), d["p3"],
                   Quadrant(d["quadrant"]) if d["quadrant"] else None, d["frame_id"])


def model_runner(model, batch_size: int = 64) -> Runner:
    """Adapt a ``PromptSegmenter`` to the runner interface."""
    def run(image, prompts):
        return [(p.mask, p.existence) for p in model.predict(image, list(prompts), batch_size)]
    return run


class CountingRunner:
    """Wraps a runner and records every prompt it is asked to run."""

    def __init__(self, runner: Runner):
        self.runner = runner
        self.calls: list[PromptText] = []

    def __call__(self, image, prompts):
        self.calls.extend(prompts)
        return self.runner(image, prompts)


def first_pass(image, c: int, runner: Runner, lex: ClassLexicon,
               use_description: bool = True) -> tuple[list[np.ndarray], list[float]]:
    prompts = [name_prompt(c, lex)]
    if use_description:
        prompts.append(description_prompt(c, lex))
    out = runner(image, prompts)
    return [m for m, _ in out], [float(p) for _, p in out]


def second_pass(image, c: int, q: Quadrant, runner: Runner, lex: ClassLexicon) -> tuple[np.ndarray, float]:
    (m3, p3), = runner(image, [location_prompt(c, q, lex)])
    return m3, float(p3)


def estimate_quadrant(*maps: np.ndarray) -> Quadrant:
    """Quadrant of the thresholded mean map; argmax pixel when nothing survives."""
    mean = np.mean(np.stack(maps), axis=0)
    mask = binarize(mean, THRESHOLD)
    if not mask.any():
        mask = np.zeros_like(mask)
        mask[np.unravel_index(np.argmax(mean), mean.shape)] = 1
    return quadrant_of(mask)


def gate_passes(first_probs: Sequence[float]) -> bool:
    return float(np.mean(first_probs)) >= THRESHOLD


def combine_maps(first_maps: Sequence[np.ndarray], first_probs: Sequence[float],
                 m3: np.ndarray | None = None, p3: float | None = None,
                 gate: bool | None = None) -> tuple[np.ndarray, Branch]:
    """Existence-gated combination for any number of first-pass prompts.

    ``gate`` overrides the existence decision (oracle presence); the location
    confirmation still follows ``p3``.
    """
    passed = gate_passes(first_probs) if gate is None else gate
    if (m3 is None) != (p3 is None):
        raise ValueError("m3 and p3 must be given together")
    if not passed:
        if m3 is not None:
            raise ValueError("second-pass map supplied although the existence gate failed")
        return np.zeros_like(first_maps[0]), Branch.ABSENT
    if m3 is not None and p3 >= THRESHOLD:
        return np.mean(np.stack([*first_maps, m3]), axis=0), Branch.CONFIRMED
    return np.mean(np.stack(first_maps), axis=0), Branch.NO_CONFIRM


def combine(m1: np.ndarray, m2: np.ndarray, p1: float, p2: float,
            m3: np.ndarray | None = None, p3: float | None = None) -> np.ndarray:
    """Two-prompt combination rule; ``m3``/``p3`` are required exactly when the gate passes."""
    if gate_passes([p1, p2]) and m3 is None:
        raise ValueError("existence gate passed: second-pass map and probability are required")
    return combine_maps([m1, m2], [p1, p2], m3, p3)[0]


def refine_class(image, c: int, runner: Runner, lex: ClassLexicon,
                 opts: RefineOptions = RefineOptions()) -> tuple[np.ndarray, RefinementTrace]:
    maps, probs = first_pass(image, c, runner, lex, opts.use_description)
    trace = RefinementTrace(c, probs, Branch.ABSENT, first_maps=maps)
    passed = gate_passes(probs) or not opts.gated
    m3 = p3 = None
    if passed and opts.use_refinement:
        q = estimate_quadrant(*maps)
        m3, p3 = second_pass(image, c, q, runner, lex)
        trace.quadrant, trace.p3, trace.m3 = q, p3, m3
    if opts.gated:
        combined, trace.branch = combine_maps(maps, probs, m3, p3)
    else:
        combined = np.mean(np.stack(maps + ([m3] if m3 is not None else [])), axis=0)
        trace.branch = Branch.UNGATED
    return combined, trace


def infer_frame(image, runner: Runner, lex: ClassLexicon, opts: RefineOptions = RefineOptions(),
                classes: Iterable[int] | None = None) -> tuple[list[np.ndarray], list[RefinementTrace]]:
    """Run every class (or only ``classes``) through the refinement procedure.

    Classes that are not queried get all-zero maps and no trace.
    """
    queried = range(lex.num_classes) if classes is None else sorted(classes)
    maps: list[np.ndarray | None] = [None] * lex.num_classes
    traces = []
    for c in queried:
        maps[c], trace = refine_class(image, c, runner, lex, opts)
        traces.append(trace)
    shape = np.shape(image)[:2]
    return [m if m is not None else np.zeros(shape) for m in maps], traces


def aggregate(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel argmax over classes at or above 0.5; ties to the lowest id, else background."""
    stack = np.stack([np.asarray(m, dtype=float) for m in maps])
    candidate = np.where(stack >= THRESHOLD, stack, -np.inf)
    best = np.argmax(candidate, axis=0)  # first maximum = lowest class id
    any_candidate = np.isfinite(candidate).any(axis=0)
    return np.where(any_candidate, best + 1, 0).astype(np.int32)
