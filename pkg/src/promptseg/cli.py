"""Command-line entry point: gen-data, train, eval, infer, ablate, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .ablation import GRIDS, run_ablation
from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError,
    check_keys,
    make_synth_config,
    make_train_config,
    read_flat,
    split_run_config,
    write_flat,
)
from .data import DatasetError, DatasetManifest, gen_split, load_records, synthetic_lexicon, write_dataset
from .evaluation import checkpoint_lexicon, evaluate_checkpoint
from .model import ModelConfig
from .plotting import ablation_figure, overlay_figure
from .prompts import ClassLexicon
from .refine import RefineOptions, aggregate, infer_frame, model_runner
from .report import FIELDS, summarize_run
from .training import DivergenceError, train
from .types import check_image

log = logging.getLogger("promptseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SPLIT_SIZES = {"train_size": 1500, "val_size": 300, "test_size": 0}


def cmd_gen_data(args) -> int:
    raw = read_flat(args.config)
    check_keys(raw, set(SPLIT_SIZES) | {"name"} | set(make_synth_config({}).to_dict()), "dataset config")
    sizes = {k: int(raw.pop(k, v)) for k, v in SPLIT_SIZES.items()}
    name = str(raw.pop("name", "synthetic"))
    cfg = make_synth_config(raw)
    lex = synthetic_lexicon(cfg.num_classes)
    out = Path(args.out)
    for key, size in sizes.items():
        if size <= 0:
            continue
        split = key[: -len("_size")]
        records = gen_split(cfg, split, size)
        manifest = DatasetManifest(name, split, cfg.num_classes, [],
                                   provenance={"synthetic": True, "config_hash": cfg.config_hash(),
                                               "seed": cfg.seed})
        write_dataset(records, manifest, out / split, lex)
        print(f"{split}\t{size}\t{out / split}")
    write_flat({**cfg.to_dict(), **sizes, "name": name}, out / "config.yaml")
    return EXIT_OK


def _load_split(root: Path, split: str):
    path = root / split
    if not path.exists():
        raise DatasetError(f"{root}: no {split} split")
    return load_records(path)


def _data_root(config_path, value) -> Path:
    data = Path(value)
    if not data.is_absolute():
        data = (Path(config_path).parent / data).resolve()
    return data


def _model_config(lex: ClassLexicon | None, kw: dict) -> ModelConfig:
    """Validate model settings; with ``lex=None`` only the settings themselves are checked."""
    try:
        if lex is None:
            return ModelConfig(vocab=("<pad>",), **kw)
        return ModelConfig.for_lexicon(lex, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model settings: {e}") from e


def cmd_train(args) -> int:
    raw = read_flat(args.config)
    model_kw, train_kw, other = split_run_config(raw, {"data"})
    if "data" not in other:
        raise ConfigError("run config needs a 'data' key pointing at a dataset directory")
    _model_config(None, model_kw)
    tcfg = make_train_config(train_kw)
    data = _data_root(args.config, other["data"])
    train_records, lex = _load_split(data, "train")
    val_records, val_lex = _load_split(data, "val")
    if val_lex != lex:
        raise DatasetError("train and val splits use different lexicons")
    mcfg = _model_config(lex, model_kw)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in mcfg.to_dict().items() if k != "vocab"}
    echo.update(tcfg.to_dict())
    echo["data"] = str(data)
    write_flat(echo, run_dir / "config.yaml")
    _, record = train(mcfg, tcfg, train_records, val_records, lex, run_dir)
    print(summarize_run(run_dir), end="")
    return EXIT_OK


def _model_and_lexicon(path, lexicon: ClassLexicon | None = None):
    """Load a checkpoint; ``lexicon`` (if given) must match the stored class count."""
    try:
        model, extra = load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise DatasetError(f"cannot load checkpoint: {e}") from e
    stored = checkpoint_lexicon(extra)
    if lexicon is None and stored is None:
        raise DatasetError("checkpoint carries no lexicon; pass --lexicon")
    if lexicon is not None and stored is not None and lexicon.num_classes != stored.num_classes:
        raise DatasetError(f"checkpoint was trained with {stored.num_classes} classes, "
                           f"got {lexicon.num_classes}")
    return model, lexicon or stored


def _options(args) -> RefineOptions:
    return RefineOptions(use_description=not args.no_description, use_refinement=not args.no_refine,
                         gated=not args.ungated)


def cmd_eval(args) -> int:
    records, lex = load_records(args.dataset)
    try:
        report, traces = evaluate_checkpoint(args.checkpoint, records, lex, args.mode, _options(args),
                                             args.batch_size)
    except (OSError, CheckpointError, ValueError) as e:
        raise DatasetError(f"cannot evaluate {args.checkpoint}: {e}") from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps() + "\n")
    (out / "report.txt").write_text(report.table(lex.names) + "\n")
    (out / "traces.jsonl").write_text("".join(t.to_json() + "\n" for t in traces))
    row = report.to_dict()
    (out / "metrics.tsv").write_text("mode\t" + "\t".join(FIELDS) + "\n" + args.mode + "\t"
                                     + "\t".join(str(row[f]) for f in FIELDS) + "\n")
    print(f"mode: {args.mode}  frames: {report.num_frames}  model calls: {report.extra['model_calls']}")
    print(report.table(lex.names))
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    try:
        check_image(image)
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e
    return image


def cmd_infer(args) -> int:
    try:
        given = ClassLexicon.load(args.lexicon) if args.lexicon else None
    except (OSError, ValueError) as e:
        raise DatasetError(f"bad lexicon {args.lexicon}: {e}") from e
    model, lex = _model_and_lexicon(args.checkpoint, given)
    image = _read_image(args.image)
    maps, traces = infer_frame(image, model_runner(model), lex, _options(args))
    labeled = aggregate(maps)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for c in range(lex.num_classes):
        Image.fromarray(labeled == c + 1).save(out / "masks" / f"{c}.pbm")
    Image.fromarray((labeled * (255 // max(lex.num_classes, 1))).astype(np.uint8)).save(out / "labels.png")
    (out / "trace.jsonl").write_text("".join(t.to_json() + "\n" for t in traces))
    overlay_figure(out / "overlay.png", image, labeled, lex.names, title=Path(args.image).name)
    print("class_id\tname\tp1\tp2\tp3\tquadrant\tbranch\tpixels")
    for t in traces:
        cells = [t.class_id, lex.name(t.class_id), t.p1, t.p2, t.p3,
                 t.quadrant.value if t.quadrant else None, t.branch.value, int((labeled == t.class_id + 1).sum())]
        print("\t".join("-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v) for v in cells))
    return EXIT_OK


def cmd_ablate(args) -> int:
    raw = read_flat(args.config)
    model_kw, train_kw, other = split_run_config(raw, {"data", "grid", "seeds", "cache_dir"})
    grid_name = other.get("grid", "prompt")
    if grid_name not in GRIDS:
        raise ConfigError(f"grid must be one of {sorted(GRIDS)}")
    if "data" not in other:
        raise ConfigError("ablation config needs a 'data' key")
    seeds = other.get("seeds", [0])
    seeds = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
    tcfg = make_train_config(train_kw)
    _model_config(None, model_kw)
    data = _data_root(args.config, other["data"])
    train_records, lex = _load_split(data, "train")
    val_records, _ = _load_split(data, "val")
    mcfg = _model_config(lex, model_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_flat(raw, out / "config.yaml")
    table = run_ablation(GRIDS[grid_name], mcfg, tcfg, train_records, val_records, lex, seeds,
                         cache_dir=other.get("cache_dir"), title=f"{grid_name} ablation")
    (out / "table.tsv").write_text(table.tsv())
    (out / "table.txt").write_text(table.text())
    (out / "table.json").write_text(json.dumps(table.to_dict(), indent=1) + "\n")
    ablation_figure(out / "ablation.png", table.rows,
                    {m: [table.mean(i, m) for i in range(len(table.rows))] for m in ("isi_iou", "ch_iou", "mc_iou")},
                    title=table.title)
    print(table.text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    if not (Path(args.run_dir) / "run.json").exists():
        raise DatasetError(f"{args.run_dir}: not a run directory (no run.json)")
    print(summarize_run(args.run_dir, args.out), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a config file")
    g.add_argument("config")
    g.add_argument("out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes checkpoint, run record and config echo")
    t.add_argument("config")
    t.add_argument("out", help="run directory")
    t.set_defaults(func=cmd_train)

    def inference_flags(sp):
        sp.add_argument("--no-refine", action="store_true", help="skip the location-prompt pass")
        sp.add_argument("--ungated", action="store_true", help="ignore the existence head")
        sp.add_argument("--no-description", action="store_true", help="first pass with the name prompt only")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--mode", choices=("robust", "oracle"), default="robust")
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", type=int, default=128)
    inference_flags(e)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image with every class prompt")
    i.add_argument("checkpoint")
    i.add_argument("image")
    i.add_argument("--out", required=True)
    i.add_argument("--lexicon", help="class table (TSV); defaults to the one stored in the checkpoint")
    inference_flags(i)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and compare an ablation grid")
    a.add_argument("config")
    a.add_argument("out")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out", help="where to write summary files (default: the run directory)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
