"""Canonical on-disk dataset layout.

    root/manifest                      JSON: schema version, name, split, C, frames, hashes
    root/lexicon.tsv                   id<TAB>name<TAB>description
    root/images/<frame_id>.ppm         binary P6, 8-bit
    root/masks/<frame_id>/<c>.pbm      binary P4
    root/presence/<frame_id>           one present class id per line
"""
from __future__ import annotations

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..prompts import ClassLexicon
from ..types import DatasetRecord

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    """Missing, corrupt or incompatible dataset files."""


@dataclass
class DatasetManifest:
    name: str
    split: str
    num_classes: int
    records: list[str]
    provenance: dict = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    lexicon_file: str = "lexicon.tsv"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if len(set(self.records)) != len(self.records):
            raise DatasetError("frame ids must be unique")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "split": self.split,
            "num_classes": self.num_classes,
            "lexicon_file": self.lexicon_file,
            "provenance": self.provenance,
            "records": list(self.records),
            "checksums": dict(self.checksums),
        }


def _image_bytes(image: np.ndarray) -> np.ndarray:
    u8 = np.round(np.asarray(image) * 255)
    if not np.allclose(u8 / 255, image, atol=0, rtol=0):
        raise DatasetError("image values must be multiples of 1/255 to store losslessly")
    return u8.astype(np.uint8)


def _frame_digest(rec: DatasetRecord) -> str:
    h = hashlib.sha256(_image_bytes(rec.image).tobytes())
    for c in sorted(rec.gt_masks):
        h.update(np.packbits(rec.gt_masks[c].astype(bool)).tobytes())
    return h.hexdigest()


def write_dataset(records: Sequence[DatasetRecord], manifest: DatasetManifest, root: str | Path,
                  lexicon: ClassLexicon) -> DatasetManifest:
    root = Path(root)
    for sub in ("images", "masks", "presence"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if lexicon.num_classes != manifest.num_classes:
        raise DatasetError("lexicon size does not match manifest class count")
    manifest.records = [r.frame_id for r in records]
    manifest.__post_init__()
    for rec in records:
        if rec.num_classes != manifest.num_classes:
            raise DatasetError(f"frame {rec.frame_id} has {rec.num_classes} classes")
        Image.fromarray(_image_bytes(rec.image), "RGB").save(root / "images" / f"{rec.frame_id}.ppm")
        mdir = root / "masks" / rec.frame_id
        mdir.mkdir(exist_ok=True)
        for c, m in sorted(rec.gt_masks.items()):
            Image.fromarray(m.astype(bool)).save(mdir / f"{c}.pbm")
        (root / "presence" / rec.frame_id).write_text("".join(f"{c}\n" for c in sorted(rec.present)))
        manifest.checksums[rec.frame_id] = _frame_digest(rec)
    lexicon.save(root / manifest.lexicon_file)
    (root / "manifest").write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest


class LazyRecords(Sequence):
    """Reads frames from disk on access, verifying checksums."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = root
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return self.load(self.manifest.records[i])

    def load(self, frame_id: str) -> DatasetRecord:
        img_path = self.root / "images" / f"{frame_id}.ppm"
        try:
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255
            masks = {}
            for c in range(self.manifest.num_classes):
                with Image.open(self.root / "masks" / frame_id / f"{c}.pbm") as im:
                    masks[c] = np.asarray(im, dtype=np.uint8)
            lines = (self.root / "presence" / frame_id).read_text().split()
        except FileNotFoundError as e:
            raise DatasetError(f"frame {frame_id}: missing file {e.filename}") from None
        try:
            rec = DatasetRecord(frame_id, image, masks, frozenset(int(x) for x in lines))
        except ValueError as e:
            raise DatasetError(f"frame {frame_id}: {e}") from None
        expected = self.manifest.checksums.get(frame_id)
        if expected is not None and _frame_digest(rec) != expected:
            raise DatasetError(f"frame {frame_id}: checksum mismatch")
        return rec


def read_dataset(root: str | Path) -> tuple[DatasetManifest, LazyRecords, ClassLexicon]:
    root = Path(root)
    try:
        raw = json.loads((root / "manifest").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{root}/manifest: {e}") from None
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{root}: schema version {raw.get('schema_version')}, expected {SCHEMA_VERSION}")
    manifest = DatasetManifest(**raw)
    try:
        lexicon = ClassLexicon.load(root / manifest.lexicon_file)
    except (FileNotFoundError, ValueError) as e:
        raise DatasetError(f"{root}: bad lexicon ({e})") from None
    if lexicon.num_classes != manifest.num_classes:
        raise DatasetError(f"{root}: lexicon has {lexicon.num_classes} classes, manifest {manifest.num_classes}")
    missing = [f for f in manifest.records if not (root / "images" / f"{f}.ppm").exists()]
    if missing:
        raise DatasetError(f"{root}: frame {missing[0]} has no image file")
    return manifest, LazyRecords(root, manifest), lexicon


def load_records(root: str | Path) -> tuple[list[DatasetRecord], ClassLexicon]:
    _, recs, lex = read_dataset(root)
    return list(recs), lex
