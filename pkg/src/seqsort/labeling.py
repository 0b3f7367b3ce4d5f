"""Label taxonomy and series-description -> label mapping.

Class indices follow alphabetical order of the enumeration names; the index
tables are embedded in every checkpoint so training and inference agree.
"""
from __future__ import annotations

import enum
import fnmatch
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

from .dicom import SeriesRecord
from .errors import ConfigError

TAXONOMY_VERSION = "cmr-35-v1"


class SequenceClass(str, enum.Enum):
    B0Map = "B0Map"
    CineBSSFP = "CineBSSFP"
    DBLGE = "DBLGE"
    EGE = "EGE"
    FST2 = "FST2"
    HASTE = "HASTE"
    MOLLINative = "MOLLINative"
    MOLLIPost = "MOLLIPost"
    Perfusion = "Perfusion"
    PhaseContrast = "PhaseContrast"
    ScoutImaging = "ScoutImaging"
    T2MapBright = "T2MapBright"
    T2MapDark = "T2MapDark"
    T2StarMap = "T2StarMap"
    TIScout = "TIScout"
    TestPerfusion = "TestPerfusion"
    WBLGE = "WBLGE"

    @property
    def index(self) -> int:
        return SEQUENCES.index(self)


class PlaneClass(str, enum.Enum):
    Aorta = "Aorta"
    Axial = "Axial"
    FourChamber = "FourChamber"
    LVOT = "LVOT"
    MPA = "MPA"
    Multiplanar = "Multiplanar"
    RVOT = "RVOT"
    ShortAxis = "ShortAxis"
    ThreeChamber = "ThreeChamber"
    TwoChamber = "TwoChamber"

    @property
    def index(self) -> int:
        return PLANES.index(self)


SEQUENCES: tuple[SequenceClass, ...] = tuple(sorted(SequenceClass, key=lambda c: c.value))
PLANES: tuple[PlaneClass, ...] = tuple(sorted(PlaneClass, key=lambda c: c.value))


class JointLabel(NamedTuple):
    sequence: SequenceClass
    plane: PlaneClass

    def __str__(self) -> str:
        return f"{self.sequence.value}/{self.plane.value}"

    @classmethod
    def parse(cls, text: str) -> "JointLabel":
        try:
            seq, plane = (t.strip() for t in text.split("/"))
            label = cls(_lookup(SequenceClass, seq), _lookup(PlaneClass, plane))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"not a sequence/plane label: {text!r}") from exc
        if label not in ADMISSIBLE:
            raise ConfigError(f"label {label} is not one of the admissible pairs")
        return label


def _lookup(enum_cls, name: str):
    for member in enum_cls:
        if member.value.lower() == name.lower():
            return member
    raise KeyError(name)


def label_table() -> dict[str, list[str]]:
    """Index tables written into checkpoints."""
    return {"sequence": [s.value for s in SEQUENCES], "plane": [p.value for p in PLANES]}


# Datapoint counts per magnet. Columns 0-4 were used for training
# (C1 Philips 1.5T, C1 Philips 3T, C1 Siemens 1.5T, C2 Siemens 1.5T, C3 GE 1.5T),
# columns 5-7 are external (C2 Philips 1.5T, C4 Siemens 1.5T, C4 Siemens 3T).
TABLE1_COLUMNS = (
    "C1-Philips-1.5T",
    "C1-Philips-3T",
    "C1-Siemens-1.5T",
    "C2-Siemens-1.5T",
    "C3-GE-1.5T",
    "ExtC2-Philips-1.5T",
    "ExtC4-Siemens-1.5T",
    "ExtC4-Siemens-3T",
)
TABLE1_TOTALS = (3625, 1352, 523, 1638, 604, 306, 487, 133)

_S, _P = SequenceClass, PlaneClass
TABLE1: dict[JointLabel, tuple[int, ...]] = {
    JointLabel(_S.B0Map, _P.Axial): (0, 36, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.CineBSSFP, _P.TwoChamber): (275, 131, 0, 181, 50, 24, 13, 4),
    JointLabel(_S.CineBSSFP, _P.ThreeChamber): (153, 54, 0, 94, 47, 27, 14, 6),
    JointLabel(_S.CineBSSFP, _P.FourChamber): (192, 145, 0, 109, 50, 27, 14, 15),
    JointLabel(_S.CineBSSFP, _P.LVOT): (43, 3, 2, 40, 0, 0, 8, 5),
    JointLabel(_S.CineBSSFP, _P.RVOT): (31, 4, 0, 0, 7, 0, 0, 10),
    JointLabel(_S.CineBSSFP, _P.ShortAxis): (345, 194, 0, 107, 48, 35, 19, 13),
    JointLabel(_S.DBLGE, _P.TwoChamber): (127, 3, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.DBLGE, _P.ThreeChamber): (107, 5, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.DBLGE, _P.FourChamber): (110, 4, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.DBLGE, _P.ShortAxis): (129, 3, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.EGE, _P.TwoChamber): (112, 3, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.EGE, _P.ThreeChamber): (83, 3, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.EGE, _P.FourChamber): (84, 3, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.FST2, _P.TwoChamber): (26, 3, 25, 0, 0, 3, 3, 1),
    JointLabel(_S.FST2, _P.ThreeChamber): (22, 0, 27, 0, 0, 0, 3, 1),
    JointLabel(_S.FST2, _P.FourChamber): (28, 3, 25, 0, 47, 2, 3, 1),
    JointLabel(_S.FST2, _P.ShortAxis): (30, 9, 27, 0, 45, 4, 0, 3),
    JointLabel(_S.HASTE, _P.Axial): (137, 11, 0, 88, 47, 16, 45, 14),
    JointLabel(_S.MOLLINative, _P.ShortAxis): (136, 66, 94, 0, 0, 0, 30, 0),
    JointLabel(_S.MOLLIPost, _P.ShortAxis): (141, 53, 113, 0, 0, 0, 29, 0),
    JointLabel(_S.PhaseContrast, _P.Aorta): (31, 7, 0, 103, 11, 0, 1, 12),
    JointLabel(_S.PhaseContrast, _P.MPA): (23, 5, 0, 0, 8, 0, 1, 9),
    JointLabel(_S.Perfusion, _P.ShortAxis): (60, 83, 0, 175, 0, 17, 0, 0),
    JointLabel(_S.ScoutImaging, _P.Multiplanar): (156, 121, 0, 87, 0, 8, 90, 0),
    JointLabel(_S.T2MapBright, _P.ShortAxis): (0, 0, 28, 0, 0, 0, 0, 0),
    JointLabel(_S.T2MapDark, _P.ShortAxis): (26, 16, 0, 0, 0, 0, 0, 0),
    JointLabel(_S.T2StarMap, _P.ShortAxis): (9, 33, 5, 0, 0, 0, 0, 0),
    JointLabel(_S.TestPerfusion, _P.ShortAxis): (36, 55, 0, 93, 0, 15, 0, 0),
    JointLabel(_S.TIScout, _P.FourChamber): (30, 0, 5, 0, 0, 0, 0, 0),
    JointLabel(_S.TIScout, _P.ShortAxis): (271, 55, 172, 90, 52, 18, 43, 12),
    JointLabel(_S.WBLGE, _P.TwoChamber): (163, 60, 0, 101, 47, 34, 42, 5),
    JointLabel(_S.WBLGE, _P.ThreeChamber): (141, 55, 0, 98, 47, 25, 33, 4),
    JointLabel(_S.WBLGE, _P.FourChamber): (147, 48, 0, 96, 49, 30, 46, 4),
    JointLabel(_S.WBLGE, _P.ShortAxis): (221, 78, 0, 176, 47, 21, 50, 14),
}
del _S, _P

ADMISSIBLE: frozenset[JointLabel] = frozenset(TABLE1)


def table1_column(name: str) -> dict[JointLabel, int]:
    col = TABLE1_COLUMNS.index(name)
    return {label: counts[col] for label, counts in TABLE1.items()}


# ---------------------------------------------------------------------------
# rule-based mapping

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def _tokens(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class _Term:
    alternatives: tuple[str, ...]
    negated: bool = False

    def matches(self, text: str, tokens: list[str]) -> bool:
        hit = False
        for alt in self.alternatives:
            if alt.startswith('"'):
                hit = alt.strip('"') in text
            else:
                hit = any(fnmatch.fnmatchcase(tok, alt) for tok in tokens)
            if hit:
                break
        return hit != self.negated


@dataclass(frozen=True)
class Rule:
    pattern: str
    terms: tuple[_Term, ...]
    label: JointLabel

    def matches(self, text: str) -> bool:
        low = text.lower()
        toks = _tokens(low)
        return all(t.matches(low, toks) for t in self.terms)


def parse_pattern(pattern: str) -> tuple[_Term, ...]:
    terms = []
    for chunk in pattern.split("&"):
        chunk = chunk.strip()
        negated = chunk.startswith("!")
        chunk = chunk.lstrip("!").strip()
        alts = tuple(a.strip().lower() for a in chunk.split("|") if a.strip())
        if not alts:
            raise ConfigError(f"empty term in pattern {pattern!r}")
        terms.append(_Term(alts, negated))
    return tuple(terms)


@dataclass(frozen=True)
class LabelMap:
    rules: tuple[Rule, ...]
    provenance: str = ""

    @classmethod
    def from_text(cls, text: str, provenance: str = "") -> "LabelMap":
        """Parse ``pattern => Sequence/Plane`` lines.

        A pattern is terms joined by ``&``; a term is alternatives joined by
        ``|`` and may be negated with a leading ``!``. Bare alternatives are
        shell globs matched against alphanumeric tokens of the lower-cased
        text; double-quoted alternatives are raw substrings.
        """
        rules = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=>" not in line:
                raise ConfigError(f"{provenance or 'label map'}:{lineno}: missing '=>'")
            pattern, target = (p.strip() for p in line.split("=>", 1))
            try:
                rules.append(Rule(pattern, parse_pattern(pattern), JointLabel.parse(target)))
            except ConfigError as exc:
                raise ConfigError(f"{provenance or 'label map'}:{lineno}: {exc}") from exc
        return cls(tuple(rules), provenance)

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        return cls.from_text(Path(path).read_text(), provenance=str(path))

    @classmethod
    def default(cls) -> "LabelMap":
        text = resources.files("seqsort.data").joinpath("default_labels.map").read_text()
        return cls.from_text(text, provenance="builtin:default_labels.map")

    def match(self, text: str) -> JointLabel | None:
        for rule in self.rules:
            if rule.matches(text):
                return rule.label
        return None


def assign_label(record: SeriesRecord, label_map: LabelMap) -> JointLabel | None:
    """First matching rule on the description, then on the protocol name; None = unlabeled."""
    label = label_map.match(record.representative_description or "")
    if label is None and record.protocol_name:
        label = label_map.match(record.protocol_name)
    return label


def enforce_class_threshold(counts: Mapping[JointLabel, int], threshold: int = 20) -> set[JointLabel]:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return {label for label, n in counts.items() if n >= threshold}


def count_labels(labels: Iterable[JointLabel | None]) -> dict[JointLabel, int]:
    counts: dict[JointLabel, int] = {}
    for label in labels:
        if label is not None:
            counts[label] = counts.get(label, 0) + 1
    return counts
