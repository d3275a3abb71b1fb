"""Prompt families (name, description, location) and balanced training prompt sets."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .types import DatasetRecord, EmptyMaskError, Quadrant, center_of_mass


class PromptKind(str, enum.Enum):
    NAME = "name"
    DESCRIPTION = "description"
    LOCATION = "location"


@dataclass(frozen=True)
class PromptText:
    text: str
    kind: PromptKind
    class_id: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")


@dataclass(frozen=True)
class ClassLexicon:
    names: Mapping[int, str]
    descriptions: Mapping[int, str]

    def __post_init__(self):
        if set(self.names) != set(self.descriptions):
            raise ValueError("names and descriptions must cover the same class ids")
        if sorted(self.names) != list(range(len(self.names))):
            raise ValueError("class ids must be 0..C-1")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def name(self, c: int) -> str:
        try:
            return self.names[c]
        except KeyError:
            raise KeyError(f"unknown class id {c}") from None

    def description(self, c: int) -> str:
        try:
            return self.descriptions[c]
        except KeyError:
            raise KeyError(f"unknown class id {c}") from None

    @classmethod
    def from_rows(cls, rows) -> "ClassLexicon":
        names, descriptions = {}, {}
        for cid, name, desc in rows:
            names[int(cid)] = name
            descriptions[int(cid)] = desc
        return cls(names, descriptions)

    @classmethod
    def loads(cls, text: str, source: str = "<lexicon>") -> "ClassLexicon":
        """Parse a tab-separated ``id<TAB>name<TAB>description`` table."""
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{source}:{lineno}: expected 3 tab-separated fields")
            rows.append(parts)
        return cls.from_rows(rows)

    @classmethod
    def load(cls, path: str | Path) -> "ClassLexicon":
        return cls.loads(Path(path).read_text(encoding="utf-8"), str(path))

    def dumps(self) -> str:
        return "".join(
            f"{c}\t{self.names[c]}\t{self.descriptions[c]}\n" for c in sorted(self.names)
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


DESCRIPTIONS = {
    "bipolar forceps": "Bipolar forceps feature slim insulated handles and precise tips for targeted tissue coagulation and manipulation.",
    "prograsp forceps": "Prograsp forceps feature ergonomic handles and curved serrated jaws for secure and precise tissue manipulation during surgery.",
    "large needle driver": "Large needle drivers are equipped with sturdy handles and sharp precise jaws for efficient suturing in surgical settings.",
    "monopolar curved scissors": "Monopolar curved scissors have slender ergonomic handles and sharp curved blades for precise cutting during surgical operations.",
    "ultrasound probe": "The ultrasound probe features a slim elongated design with a smooth tip for detailed imaging during surgical interventions.",
    "suction instrument": "The suction instrument boasts a narrow elongated tube with a controllable tip for precise fluid removal during surgery.",
    "clip applier": "The clip applier has a long slender shaft with a specialized tip for deploying clips securely during surgical procedures.",
    "vessel sealer": "Vessel sealer features a streamlined handle and specialized tips for precise sealing and division of blood vessels during surgery.",
    "grasping retractor": "Grasping retractor sports a long handle with claw-like tips for firmly holding tissues during surgical operations.",
}

_ENDOVIS2018 = ["bipolar forceps", "prograsp forceps", "large needle driver",
                "monopolar curved scissors", "ultrasound probe", "suction instrument",
                "clip applier"]
_ENDOVIS2017 = ["bipolar forceps", "prograsp forceps", "large needle driver",
                "vessel sealer", "grasping retractor", "monopolar curved scissors",
                "ultrasound probe"]


def _lexicon(names: list[str]) -> ClassLexicon:
    return ClassLexicon.from_rows((i, n, DESCRIPTIONS[n]) for i, n in enumerate(names))


ENDOVIS2018 = _lexicon(_ENDOVIS2018)
ENDOVIS2017 = _lexicon(_ENDOVIS2017)
LEXICONS = {"endovis2018": ENDOVIS2018, "endovis2017": ENDOVIS2017}


def name_prompt(c: int, lex: ClassLexicon) -> PromptText:
    return PromptText(f"The {lex.name(c)}", PromptKind.NAME, c)


def description_prompt(c: int, lex: ClassLexicon) -> PromptText:
    return PromptText(lex.description(c), PromptKind.DESCRIPTION, c)


def location_prompt(c: int, q: Quadrant, lex: ClassLexicon) -> PromptText:
    return PromptText(f"The {lex.name(c)} on the {Quadrant(q).phrase}", PromptKind.LOCATION, c)


def quadrant_of(m: np.ndarray) -> Quadrant:
    """Quadrant holding the mask's center of mass; exact midpoints go left / top."""
    h, w = np.asarray(m).shape
    row, col = center_of_mass(m)
    return Quadrant.from_sides(left=col <= w / 2, top=row <= h / 2)


@dataclass(frozen=True)
class PromptedSample:
    frame_id: str
    class_id: int
    prompt: PromptText
    target: np.ndarray
    exists: int
    negative: bool = False

    def __post_init__(self):
        if self.exists != int(bool(self.target.any())):
            raise ValueError("exists flag must match target non-emptiness")


def _rng(seed: int, frame_id: str, *keys: int) -> np.random.Generator:
    # Stable across processes (unlike hash()) and independent of dataset order.
    digest = hashlib.sha256(frame_id.encode("utf-8")).digest()
    frame_key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([seed & 0xFFFFFFFF, frame_key, *keys])


def build_training_prompts(
    rec: DatasetRecord,
    lex: ClassLexicon,
    rng_seed: int,
    kinds: tuple[PromptKind, ...] = tuple(PromptKind),
    corrupt_location_negatives: bool = False,
) -> list[PromptedSample]:
    """Positive prompts for every present class, balanced by negatives for absent ones.

    Each present class yields one sample per enabled prompt kind, the location
    prompt using the quadrant of its ground-truth mask. Absent classes are drawn
    without replacement (cycling with replacement when there are fewer absent
    than present classes) until the negative count matches; their location
    prompts use a uniformly drawn quadrant and their targets are empty.
    """
    if lex.num_classes == 0 or rec.num_classes == 0:
        raise ValueError("record defines no classes")
    if rec.num_classes != lex.num_classes:
        raise ValueError(f"record has {rec.num_classes} classes, lexicon {lex.num_classes}")
    kinds = tuple(PromptKind(k) for k in kinds)
    present = sorted(rec.present)
    absent = [c for c in range(lex.num_classes) if c not in rec.present]
    empty = np.zeros(rec.shape, dtype=np.uint8)

    def emit(c, target, quadrant, negative=False):
        out = []
        for kind in kinds:
            if kind is PromptKind.NAME:
                p = name_prompt(c, lex)
            elif kind is PromptKind.DESCRIPTION:
                p = description_prompt(c, lex)
            else:
                p = location_prompt(c, quadrant, lex)
            out.append(PromptedSample(rec.frame_id, c, p, target, int(target.any()), negative))
        return out

    samples: list[PromptedSample] = []
    for c in present:
        mask = rec.gt_masks[c].astype(np.uint8)
        samples.extend(emit(c, mask, quadrant_of(mask)))
    if not present:
        return samples

    quads = list(Quadrant)
    if absent:
        rng = _rng(rng_seed, rec.frame_id)
        chosen: list[int] = []
        while len(chosen) < len(present):
            take = min(len(absent), len(present) - len(chosen))
            chosen.extend(int(c) for c in rng.choice(absent, size=take, replace=False))
        seen: dict[int, int] = {}
        for c in chosen:
            k = seen.get(c, 0)
            seen[c] = k + 1
            q = quads[int(_rng(rng_seed, rec.frame_id, c, k).integers(4))]
            samples.extend(emit(c, empty, q, negative=True))
    elif corrupt_location_negatives and PromptKind.LOCATION in kinds:
        # Every class present: wrong-quadrant location prompts, target kept.
        for c in present:
            mask = rec.gt_masks[c].astype(np.uint8)
            true_q = quadrant_of(mask)
            for q in quads:
                if q is not true_q:
                    samples.append(PromptedSample(
                        rec.frame_id, c, location_prompt(c, q, lex), mask, 1, True))
    return samples
