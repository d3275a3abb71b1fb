"""Prompt-design and fusion-structure ablation grids."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import evaluate_records
from .model import ModelConfig
from .prompts import ClassLexicon
from .refine import RefineOptions
from .training import TrainConfig, train, train_cached
from .types import DatasetRecord

log = logging.getLogger(__name__)

METRICS = ("isi_iou", "ch_iou", "mc_iou")


@dataclass(frozen=True)
class AblationRow:
    name: str
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    use_refinement: bool = False


PROMPT_GRID = (
    AblationRow("name prompt", {"use_location": False, "use_description": False}),
    AblationRow("(+) location prompt", {"use_location": True, "use_description": False}),
    AblationRow("  (+) iterative refinement", {"use_location": True, "use_description": False},
                use_refinement=True),
    AblationRow("(+) description prompt", {"use_location": True, "use_description": True}),
    AblationRow("  (+) iterative refinement", {"use_location": True, "use_description": True},
                use_refinement=True),
)

_OFF = {"use_sgb": False, "use_raw_language": False, "use_language_tokens": False}
STRUCTURE_GRID = (
    AblationRow("MMFB", model=dict(_OFF), use_refinement=True),
    AblationRow("MMFB+SGB", model={**_OFF, "use_sgb": True}, use_refinement=True),
    AblationRow("MMFB+SGB+RL", model={**_OFF, "use_sgb": True, "use_raw_language": True},
                use_refinement=True),
    AblationRow("MMFB+SGB+RL+LT", model={}, use_refinement=True),
)

GRIDS = {"prompt": PROMPT_GRID, "structure": STRUCTURE_GRID}


@dataclass
class AblationTable:
    title: str
    rows: list[str]
    flags: list[dict]
    per_seed: list[list[dict[str, float]]]  # row -> seed -> metric -> value
    seeds: list[int]

    def mean(self, i: int, metric: str) -> float:
        return float(np.mean([s[metric] for s in self.per_seed[i]]))

    def to_dict(self) -> dict:
        return {"title": self.title, "rows": self.rows, "flags": self.flags,
                "per_seed": self.per_seed, "seeds": self.seeds}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        return cls(d["title"], d["rows"], d["flags"], d["per_seed"], d["seeds"])

    def tsv(self) -> str:
        head = ["row"] + [m for m in METRICS] + [f"{m}_seed{s}" for m in METRICS for s in self.seeds]
        lines = ["\t".join(head)]
        for i, name in enumerate(self.rows):
            vals = [f"{self.mean(i, m):.6f}" for m in METRICS]
            vals += [f"{self.per_seed[i][k][m]:.6f}" for m in METRICS for k in range(len(self.seeds))]
            lines.append("\t".join([name.strip()] + vals))
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        width = max(len(r) for r in self.rows) + 2
        out = [self.title, f"{'':<{width}}" + "".join(f"{m:>10}" for m in METRICS)]
        for i, name in enumerate(self.rows):
            out.append(f"{name:<{width}}" + "".join(f"{100 * self.mean(i, m):>10.2f}" for m in METRICS))
        return "\n".join(out) + "\n"


def run_ablation(grid: Sequence[AblationRow], base_model: ModelConfig, base_train: TrainConfig,
                 train_records: Sequence[DatasetRecord], val_records: Sequence[DatasetRecord],
                 lex: ClassLexicon, seeds: Sequence[int] = (0,), cache_dir: str | Path | None = None,
                 title: str = "ablation") -> AblationTable:
    """Train each distinct configuration once per seed and score every row on ``val_records``.

    Rows that differ only in ``use_refinement`` share one trained model. Rows with
    refinement run the full gated procedure; rows without it average the
    first-pass maps ungated.
    """
    trained = {}
    per_seed = [[] for _ in grid]
    for seed in seeds:
        for i, row in enumerate(grid):
            mcfg = base_model.with_updates(**row.model)
            tcfg = TrainConfig.from_dict({**base_train.to_dict(), **row.train, "seed": seed})
            key = json.dumps([mcfg.to_dict(), tcfg.to_dict()], sort_keys=True)
            if key not in trained:
                log.info("training row %r seed %d", row.name, seed)
                if cache_dir is not None:
                    model, _, _ = train_cached(mcfg, tcfg, train_records, val_records, lex, cache_dir)
                else:
                    model, _ = train(mcfg, tcfg, train_records, val_records, lex)
                trained[key] = model
            # Without refinement a frame is read off the first pass alone: the existence
            # gate belongs to the two-iteration procedure and is skipped with it.
            opts = RefineOptions(tcfg.use_description, use_refinement=row.use_refinement,
                                 gated=row.use_refinement)
            report, _ = evaluate_records(trained[key], val_records, lex, opts)
            per_seed[i].append({m: getattr(report, m) for m in METRICS})
    flags = [{**row.train, **row.model, "use_refinement": row.use_refinement} for row in grid]
    return AblationTable(title, [r.name for r in grid], flags, per_seed, list(seeds))
