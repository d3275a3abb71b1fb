"""Human-readable summaries of run directories, with delimited tables and figures."""
from __future__ import annotations

import collections
from pathlib import Path

from .metrics import EvalReport
from .plotting import training_figure, variants_figure
from .refine import RefinementTrace
from .training import RunRecord

FIELDS = ("ch_iou", "isi_iou", "mc_iou", "fpr", "precision", "recall", "f1", "tp", "fp", "tn", "fn")


def metrics_tsv(record: RunRecord) -> str:
    lines = ["\t".join(("epoch", "variant") + FIELDS)]
    for epoch in sorted(record.val_reports):
        for name, rep in record.val_reports[epoch].items():
            lines.append("\t".join([str(epoch), name] + [_fmt(getattr(rep, f)) for f in FIELDS]))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def trace_summary(path: Path) -> str:
    traces = [RefinementTrace.from_json(line) for line in path.read_text().splitlines() if line.strip()]
    branches = collections.Counter(t.branch.value for t in traces)
    quads = collections.Counter(t.quadrant.value for t in traces if t.quadrant)
    lines = [f"refinement traces: {len(traces)}"]
    lines += [f"  branch {k}: {v}" for k, v in sorted(branches.items())]
    lines += [f"  quadrant {k}: {v}" for k, v in sorted(quads.items())]
    return "\n".join(lines)


def summarize_run(run_dir: str | Path, out_dir: str | Path | None = None) -> str:
    """Write summary.txt, metrics.tsv and figures for a training run; return the summary text."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord.load(run_dir / "run.json")
    tc, mc = record.train_config, record.model_config
    lines = [
        f"run: {run_dir}",
        f"epochs: {len(record.train_loss)}  wall clock: {record.wall_clock / 60:.1f} min",
        f"model: base_channels={mc['base_channels']} heads={mc['num_heads']} "
        f"language tokens={mc['language_token_count']} lam={mc['lam']}",
        f"train: lr={tc['base_lr']} batch={tc['batch_size']} seed={tc['seed']} "
        f"location={tc['use_location']} description={tc['use_description']}",
        f"final train loss: {record.train_loss[-1]:.4f}" if record.train_loss else "no completed epochs",
    ]
    final = record.final_reports()
    if final:
        lines.append(f"validation at epoch {max(record.val_reports)}:")
        lines.append(f"  {'variant':<20}" + "".join(f"{f:>10}" for f in FIELDS[:7]))
        for name, rep in final.items():
            lines.append(f"  {name:<20}" + "".join(f"{getattr(rep, f):>10.4f}" for f in FIELDS[:7]))
        training_figure(out_dir / "training.png", record.train_loss,
                        {e: _as_dict(r["gated"]) for e, r in record.val_reports.items() if "gated" in r})
        variants_figure(out_dir / "variants.png", {k: _as_dict(v) for k, v in final.items()})
    traces = run_dir / "traces.jsonl"
    if traces.exists():
        lines.append(trace_summary(traces))
    text = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(text)
    (out_dir / "metrics.tsv").write_text(metrics_tsv(record))
    return text


def _as_dict(rep: EvalReport) -> dict:
    return {f: float(getattr(rep, f)) for f in FIELDS}
