"""Training loop, learning-rate schedule and ablation runs."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data.sampler import balanced_sampler
from .evaluation import evaluate_variants
from .metrics import EvalReport
from .model import ModelConfig, PromptSegmenter, segmentation_loss
from .prompts import ClassLexicon, PromptKind, build_training_prompts
from .types import DatasetRecord

log = logging.getLogger(__name__)

REFERENCE_EPOCHS = 50
REFERENCE_DECAY_EPOCHS = (30, 40)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def scaled_decay_epochs(epochs: int) -> tuple[int, ...]:
    """Decay points 30/50 and 40/50 of the run, rounded; points that fall outside are dropped."""
    out = []
    for e in REFERENCE_DECAY_EPOCHS:
        d = round(e * epochs / REFERENCE_EPOCHS)
        if 0 < d < epochs and (not out or d > out[-1]):
            out.append(d)
    return tuple(out)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] | None = None  # None: scaled from the 50-epoch schedule
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8  # frames per optimizer step; each contributes all its prompts
    frames_per_epoch: int | None = None  # None: one draw per training frame
    seed: int = 0
    use_location: bool = True
    use_description: bool = True
    use_refinement: bool = True
    eval_every: int = 5
    val_limit: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr_decay_epochs is not None:
            d = tuple(int(x) for x in self.lr_decay_epochs)
            object.__setattr__(self, "lr_decay_epochs", d)
            if any(b <= a for a, b in zip(d, d[1:])) or any(not 0 < x < self.epochs for x in d):
                raise ValueError("lr_decay_epochs must be strictly increasing and inside (0, epochs)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def decay_epochs(self) -> tuple[int, ...]:
        if self.lr_decay_epochs is not None:
            return self.lr_decay_epochs
        return scaled_decay_epochs(self.epochs)

    def prompt_kinds(self) -> tuple[PromptKind, ...]:
        kinds = [PromptKind.NAME]
        if self.use_description:
            kinds.append(PromptKind.DESCRIPTION)
        if self.use_location:
            kinds.append(PromptKind.LOCATION)
        return tuple(kinds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.lr_decay_epochs is not None:
            d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``base_lr * factor**k`` once ``k`` decay epochs have been reached."""
    k = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.base_lr * cfg.lr_decay_factor ** k


@dataclass
class RunRecord:
    model_config: dict
    train_config: dict
    train_loss: list[float] = field(default_factory=list)
    val_reports: dict[int, dict[str, EvalReport]] = field(default_factory=dict)
    learning_rates: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "model_config": self.model_config,
            "train_config": self.train_config,
            "train_loss": self.train_loss,
            "learning_rates": self.learning_rates,
            "val_reports": {str(e): {k: r.to_dict() for k, r in v.items()}
                            for e, v in self.val_reports.items()},
            "checkpoints": self.checkpoints,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            d["model_config"], d["train_config"], d["train_loss"],
            {int(e): {k: EvalReport.from_dict(r) for k, r in v.items()} for e, v in d["val_reports"].items()},
            d.get("learning_rates", []), d.get("checkpoints", []), d.get("wall_clock", 0.0),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def final_reports(self) -> dict[str, EvalReport]:
        return self.val_reports[max(self.val_reports)] if self.val_reports else {}


def _batch_tensors(samples, records_by_id):
    images = np.stack([records_by_id[s.frame_id].image for s in samples])
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
    y = torch.tensor([s.exists for s in samples], dtype=torch.float32)
    gt = torch.from_numpy(np.stack([s.target for s in samples]).astype(np.float32))
    return x, y, gt


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_records: Sequence[DatasetRecord],
          val_records: Sequence[DatasetRecord], lex: ClassLexicon, run_dir: str | Path | None = None,
          ) -> tuple[PromptSegmenter, RunRecord]:
    """Optimize existence BCE + lam * mask BCE with AdamW and a step schedule."""
    with _flush_denormals():
        return _train(model_cfg, train_cfg, train_records, val_records, lex, run_dir)


@contextlib.contextmanager
def _flush_denormals():
    # Subnormal activations late in training slow CPU kernels several-fold. The mode is
    # process-wide, so it is switched off again for callers that rely on subnormals.
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _train(model_cfg, train_cfg, train_records, val_records, lex, run_dir):
    t0 = time.perf_counter()
    torch.manual_seed(train_cfg.seed)
    model = PromptSegmenter(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.base_lr, betas=train_cfg.betas,
                            weight_decay=train_cfg.weight_decay)
    record = RunRecord(model_cfg.to_dict(), train_cfg.to_dict())
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    by_id = {r.frame_id: r for r in train_records}
    ids = [r.frame_id for r in train_records]
    stream = balanced_sampler(ids, [r.present for r in train_records], train_cfg.seed)
    kinds = train_cfg.prompt_kinds()
    per_epoch = train_cfg.frames_per_epoch or len(ids)
    steps = math.ceil(per_epoch / train_cfg.batch_size)
    val = list(val_records[: train_cfg.val_limit] if train_cfg.val_limit else val_records)

    for epoch in range(train_cfg.epochs):
        lr = learning_rate(train_cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        record.learning_rates.append(lr)
        model.train()
        total, count = 0.0, 0
        for _ in range(steps):
            frames = [next(stream) for _ in range(train_cfg.batch_size)]
            samples = []
            for k, fid in enumerate(frames):
                seed = (train_cfg.seed * 100003 + epoch) * 4099 + k
                samples.extend(build_training_prompts(by_id[fid], lex, seed, kinds))
            if not samples:
                continue
            x, y, gt = _batch_tensors(samples, by_id)
            out = model(x, [s.prompt for s in samples])
            loss = segmentation_loss(out.existence, y, out.mask, gt, model_cfg.lam)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(samples)
            count += len(samples)
        record.train_loss.append(total / max(count, 1))
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, record.train_loss[-1])

        last = epoch == train_cfg.epochs - 1
        if val and (last or (train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0)):
            reports = evaluate_variants(model, val, lex, train_cfg.use_description)
            record.val_reports[epoch] = reports
            g = reports["gated"]
            log.info("epoch %d val Ch %.4f ISI %.4f mc %.4f FPR %.4f", epoch,
                     g.ch_iou, g.isi_iou, g.mc_iou, g.fpr)

    model.eval()
    record.wall_clock = time.perf_counter() - t0
    if run_dir is not None:
        ckpt = run_dir / "model.ckpt"
        save_checkpoint(model, ckpt, {"train_config": train_cfg.to_dict(), "lexicon": lex.dumps()})
        record.checkpoints.append(ckpt.name)
        record.save(run_dir / "run.json")
    return model, record


def dataset_key(records: Sequence[DatasetRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(r.frame_id.encode())
        h.update(np.ascontiguousarray(r.image).tobytes())
    return h.hexdigest()[:16]


def run_key(model_cfg: ModelConfig, train_cfg: TrainConfig, train_records, val_records) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                       "train_data": dataset_key(train_records), "val_data": dataset_key(val_records)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def train_cached(model_cfg: ModelConfig, train_cfg: TrainConfig, train_records: Sequence[DatasetRecord],
                 val_records: Sequence[DatasetRecord], lex: ClassLexicon, cache_dir: str | Path,
                 ) -> tuple[PromptSegmenter, RunRecord, Path]:
    """Like :func:`train`, but reuses a finished run stored under ``cache_dir`` for the same inputs."""
    run_dir = Path(cache_dir) / run_key(model_cfg, train_cfg, train_records, val_records)
    if (run_dir / "run.json").exists() and (run_dir / "model.ckpt").exists():
        log.info("reusing cached run %s", run_dir)
        model, _ = load_checkpoint(run_dir / "model.ckpt")
        return model, RunRecord.load(run_dir / "run.json"), run_dir
    model, record = train(model_cfg, train_cfg, train_records, val_records, lex, run_dir)
    return model, record, run_dir
