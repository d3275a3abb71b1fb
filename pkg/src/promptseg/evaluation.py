"""Batched dataset evaluation built on the refinement rules.

Model calls are grouped across frames for throughput; the per-class logic
(gate, quadrant estimate, combination) is the same code used by
:func:`promptseg.refine.infer_frame`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import EvalReport, FrameEval, evaluate_frames
from .prompts import ClassLexicon, PromptText, description_prompt, location_prompt, name_prompt
from .refine import (
    Branch,
    RefineOptions,
    RefinementTrace,
    aggregate,
    combine_maps,
    estimate_quadrant,
    gate_passes,
)
from .types import DatasetRecord, Quadrant, from_labeled


@dataclass
class FramePasses:
    frame_id: str
    classes: list[int]
    first: dict[int, tuple[list[np.ndarray], list[float]]] = field(default_factory=dict)
    quadrant: dict[int, Quadrant] = field(default_factory=dict)
    second: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)

    @property
    def num_calls(self) -> int:
        return sum(len(p) for _, p in self.first.values()) + len(self.second)


class BatchedRunner:
    """Collects (image, prompt) requests and runs them through the model in batches."""

    def __init__(self, model, batch_size: int = 128):
        self.model = model
        self.batch_size = batch_size
        self.calls: list[PromptText] = []

    def run(self, requests: Sequence[tuple[np.ndarray, PromptText]]) -> list[tuple[np.ndarray, float]]:
        out = []
        for s in range(0, len(requests), self.batch_size):
            chunk = requests[s:s + self.batch_size]
            images = np.stack([img for img, _ in chunk])
            prompts = [p for _, p in chunk]
            self.calls.extend(prompts)
            out.extend((p.mask.astype(np.float32), p.existence)
                       for p in self.model.predict(images, prompts, self.batch_size))
        return out


def compute_passes(runner: BatchedRunner, records: Sequence[DatasetRecord], lex: ClassLexicon,
                   opts: RefineOptions = RefineOptions(), oracle: bool = False,
                   second_for_all: bool = False) -> list[FramePasses]:
    """First pass for every queried class, second pass where the options call for it.

    ``second_for_all`` also runs location prompts for gate-failing classes so
    that gated and ungated variants can be derived from one set of passes.
    In oracle mode every queried class is present, so all of them get one.
    """
    passes = []
    requests, keys = [], []
    for i, rec in enumerate(records):
        classes = sorted(rec.present) if oracle else list(range(lex.num_classes))
        passes.append(FramePasses(rec.frame_id, classes))
        for c in classes:
            prompts = [name_prompt(c, lex)]
            if opts.use_description:
                prompts.append(description_prompt(c, lex))
            for p in prompts:
                requests.append((rec.image, p))
                keys.append((i, c))
    for (i, c), (m, p) in zip(keys, runner.run(requests)):
        maps, probs = passes[i].first.setdefault(c, ([], []))
        maps.append(m)
        probs.append(p)

    if opts.use_refinement:
        requests, keys = [], []
        for i, (rec, fp) in enumerate(zip(records, passes)):
            for c in fp.classes:
                maps, probs = fp.first[c]
                if second_for_all or oracle or not opts.gated or gate_passes(probs):
                    q = estimate_quadrant(*maps)
                    fp.quadrant[c] = q
                    requests.append((rec.image, location_prompt(c, q, lex)))
                    keys.append((i, c))
        for (i, c), (m, p) in zip(keys, runner.run(requests)):
            passes[i].second[c] = (m, p)
    return passes


def combine_passes(fp: FramePasses, num_classes: int, shape: tuple[int, int],
                   opts: RefineOptions, oracle: bool = False) -> tuple[list[np.ndarray], list[RefinementTrace]]:
    """Per-class maps; ``oracle`` takes presence from the query list instead of the existence gate."""
    maps = [np.zeros(shape, dtype=np.float32) for _ in range(num_classes)]
    traces = []
    for c in fp.classes:
        first_maps, probs = fp.first[c]
        trace = RefinementTrace(c, list(probs), Branch.ABSENT, frame_id=fp.frame_id)
        m3 = p3 = None
        if opts.use_refinement and c in fp.second and (oracle or not opts.gated or gate_passes(probs)):
            m3, p3 = fp.second[c]
            trace.quadrant, trace.p3 = fp.quadrant[c], p3
        if opts.gated:
            maps[c], trace.branch = combine_maps(first_maps, probs, m3, p3, gate=True if oracle else None)
        else:
            maps[c] = np.mean(np.stack(first_maps + ([m3] if m3 is not None else [])), axis=0)
            trace.branch = Branch.UNGATED
        traces.append(trace)
    return maps, traces


def frame_eval(rec: DatasetRecord, maps: Sequence[np.ndarray], traces: Sequence[RefinementTrace]) -> FrameEval:
    labeled = aggregate(maps)
    pred = from_labeled(labeled, len(maps))
    exists = {c: False for c in range(len(maps))}
    for t in traces:
        exists[t.class_id] = gate_passes(t.first_probs)
    return FrameEval(rec.frame_id, pred, {c: rec.gt_masks[c] for c in range(len(maps))}, exists)


def evaluate_records(model, records: Sequence[DatasetRecord], lex: ClassLexicon,
                     opts: RefineOptions = RefineOptions(), mode: str = "robust",
                     batch_size: int = 128) -> tuple[EvalReport, list[RefinementTrace]]:
    """Robust mode queries every class; oracle mode only the ground-truth-present ones.

    In oracle mode the ground truth stands in for the existence gate, so every
    queried class is refined and combined as if the gate had passed.
    """
    if mode not in ("robust", "oracle"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    oracle = mode == "oracle"
    runner = BatchedRunner(model, batch_size)
    passes = compute_passes(runner, records, lex, opts, oracle=oracle)
    frames, all_traces = [], []
    for rec, fp in zip(records, passes):
        maps, traces = combine_passes(fp, lex.num_classes, rec.shape, opts, oracle)
        frames.append(frame_eval(rec, maps, traces))
        all_traces.extend(traces)
    report = evaluate_frames(frames, label=mode)
    report.extra["model_calls"] = len(runner.calls)
    return report, all_traces


VARIANTS = {
    "gated": RefineOptions(gated=True, use_refinement=True),
    "gated_no_refine": RefineOptions(gated=True, use_refinement=False),
    "ungated": RefineOptions(gated=False, use_refinement=True),
    "ungated_no_refine": RefineOptions(gated=False, use_refinement=False),
}


def evaluate_variants(model, records: Sequence[DatasetRecord], lex: ClassLexicon,
                      use_description: bool = True, batch_size: int = 128,
                      variants: Sequence[str] = tuple(VARIANTS)) -> dict[str, EvalReport]:
    """Score several gating/refinement variants from one shared set of model passes."""
    base = RefineOptions(use_description=use_description, use_refinement=True)
    runner = BatchedRunner(model, batch_size)
    passes = compute_passes(runner, records, lex, base, second_for_all=True)
    reports = {}
    for name in variants:
        v = VARIANTS[name]
        opts = RefineOptions(use_description, v.use_refinement, v.gated)
        frames = []
        for rec, fp in zip(records, passes):
            maps, traces = combine_passes(fp, lex.num_classes, rec.shape, opts)
            frames.append(frame_eval(rec, maps, traces))
        reports[name] = evaluate_frames(frames, label=name)
    return reports


def checkpoint_lexicon(extra: dict) -> ClassLexicon | None:
    return ClassLexicon.loads(extra["lexicon"]) if "lexicon" in extra else None


def evaluate_checkpoint(path, records: Sequence[DatasetRecord], lex: ClassLexicon, mode: str = "robust",
                        opts: RefineOptions = RefineOptions(), batch_size: int = 128,
                        ) -> tuple[EvalReport, list[RefinementTrace]]:
    """Load a checkpoint and evaluate it; the stored class count must match ``lex``."""
    from .checkpoint import load_checkpoint

    model, extra = load_checkpoint(path)
    stored = checkpoint_lexicon(extra)
    if stored is not None and stored.num_classes != lex.num_classes:
        raise ValueError(f"checkpoint was trained with {stored.num_classes} classes, dataset has {lex.num_classes}")
    return evaluate_records(model, records, lex, opts, mode, batch_size)
