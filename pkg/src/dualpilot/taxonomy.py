"""Four-axis complexity labels, the 13-class consolidation and label routing.

A label places a query on four ordinal axes: cognitive load (CL), context
dependency (CD), domain knowledge (DK) and task-execution effort (TE).
The 3 x 4 x 3 x 3 = 108 cells are grouped into 13 classes by a mapping file;
each class belongs to one frequency band (low / medium / high / cross) used
when sampling injection classes.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Mapping

import numpy as np

from .errors import BadDistribution, InvalidMapping


class CL(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class CD(Enum):
    NONE = "none"
    RECENT = "recent"
    LONG_RANGE = "long_range"
    CROSS_MEETING = "cross_meeting"


class DK(Enum):
    GENERAL = "general"
    BASIC = "basic"
    EXPERT = "expert"


class TE(Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class RoutingAction(Enum):
    FAST = 0
    SLOW = 1
    SLOW_RAG = 2
    SLOW_CROSS = 3

    @property
    def is_planner(self):
        return self is not RoutingAction.FAST


BANDS = ("low", "medium", "high", "cross")

_AXIS_POS = {level: i for axis in (CL, CD, DK, TE) for i, level in enumerate(axis)}

# Enterprise query frequency per band.
DEFAULT_BAND_WEIGHTS = {"low": 0.38, "medium": 0.29, "high": 0.18, "cross": 0.15}


@dataclass(frozen=True)
class ComplexityLabel:
    cl: CL
    cd: CD
    dk: DK
    te: TE

    def __lt__(self, other):
        return self.key() < other.key()

    def key(self):
        return (_AXIS_POS[self.cl], _AXIS_POS[self.cd], _AXIS_POS[self.dk], _AXIS_POS[self.te])

    def to_list(self):
        return [self.cl.value, self.cd.value, self.dk.value, self.te.value]

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise ValueError(f"expected four axis levels, got {values!r}")
        cl, cd, dk, te = (str(v).lower() for v in values)
        return cls(CL(cl), CD(cd), DK(dk), TE(te))

    @property
    def is_simple(self):
        """Low cognitive load with no context dependency."""
        return self.cl is CL.LOW and self.cd is CD.NONE


def all_cells():
    """All 108 cells of the label space in axis order."""
    return [ComplexityLabel(*combo) for combo in itertools.product(CL, CD, DK, TE)]


@dataclass(frozen=True)
class ComplexityClass:
    id: int
    name: str
    band: str
    cells: frozenset = field(compare=False, repr=False)


def infer_band(cells: Iterable[ComplexityLabel]) -> str:
    cells = list(cells)
    if all(c.cd is CD.CROSS_MEETING for c in cells):
        return "cross"
    if any(c.cl is CL.HIGH or c.dk is DK.EXPERT or c.te is TE.HIGH for c in cells):
        return "high"
    if all(c.is_simple for c in cells):
        return "low"
    return "medium"


class ClassMapping:
    """A validated partition of the 108 cells into complexity classes."""

    def __init__(self, classes: Iterable[ComplexityClass]):
        self.classes = sorted(classes, key=lambda c: c.id)
        self._by_cell = {}
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise InvalidMapping(f"duplicate class ids in {ids}")
        for cls in self.classes:
            if cls.band not in BANDS:
                raise InvalidMapping(f"class {cls.name!r} has unknown band {cls.band!r}")
            for cell in cls.cells:
                if cell in self._by_cell:
                    other = self._by_cell[cell].name
                    raise InvalidMapping(f"cell {cell.to_list()} in both {other!r} and {cls.name!r}")
                self._by_cell[cell] = cls
        missing = [c for c in all_cells() if c not in self._by_cell]
        if missing:
            raise InvalidMapping(f"{len(missing)} cells unassigned, e.g. {missing[0].to_list()}")

    def __len__(self):
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def by_id(self, class_id):
        for cls in self.classes:
            if cls.id == class_id:
                return cls
        raise KeyError(class_id)

    def by_name(self, name):
        for cls in self.classes:
            if cls.name == name:
                return cls
        raise KeyError(name)

    def classes_in_band(self, band):
        return [c for c in self.classes if c.band == band]

    def consolidate(self, label: ComplexityLabel) -> ComplexityClass:
        return self._by_cell[label]

    def to_json(self):
        return {
            "classes": [
                {
                    "id": c.id,
                    "name": c.name,
                    "band": c.band,
                    "cells": [cell.to_list() for cell in sorted(c.cells)],
                }
                for c in self.classes
            ]
        }

    @classmethod
    def from_json(cls, obj):
        try:
            entries = obj["classes"]
            classes = []
            for entry in entries:
                cells = frozenset(ComplexityLabel.from_list(v) for v in entry["cells"])
                if len(cells) != len(entry["cells"]):
                    raise InvalidMapping(f"class {entry['name']!r} lists a cell twice")
                band = entry.get("band") or infer_band(cells)
                classes.append(ComplexityClass(int(entry["id"]), str(entry["name"]), band, cells))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidMapping(f"malformed class mapping: {exc}") from exc
        return cls(classes)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_default_mapping() -> ClassMapping:
    """Construct the shipped 13-class grouping.

    Cross-meeting cells split by cognitive load (2 classes); the remaining
    cells take a dedicated expert-DK class, then a dedicated high-TE class,
    then one class per (CL, CD) pair (9 classes).
    """
    groups: dict[str, list] = {}
    order = []
    cd_names = {CD.NONE: "standalone", CD.RECENT: "recent", CD.LONG_RANGE: "long-range"}
    cl_names = {CL.LOW: "recall", CL.MEDIUM: "synthesis", CL.HIGH: "inference"}
    # fix class order before assignment so ids are stable
    order.append("simple-fact")
    groups["simple-fact"] = []
    for cl in CL:
        for cd in (CD.NONE, CD.RECENT, CD.LONG_RANGE):
            name = f"{cl_names[cl]}-{cd_names[cd]}"
            if name == "recall-standalone":
                continue
            order.append(name)
            groups[name] = []
    for name in ("expert-knowledge", "strategic-planning", "cross-recall", "cross-synthesis"):
        order.append(name)
        groups[name] = []

    for cell in all_cells():
        if cell.cd is CD.CROSS_MEETING:
            groups["cross-recall" if cell.cl is CL.LOW else "cross-synthesis"].append(cell)
        elif cell.dk is DK.EXPERT:
            groups["expert-knowledge"].append(cell)
        elif cell.te is TE.HIGH:
            groups["strategic-planning"].append(cell)
        elif cell.is_simple:
            groups["simple-fact"].append(cell)
        else:
            groups[f"{cl_names[cell.cl]}-{cd_names[cell.cd]}"].append(cell)

    classes = [
        ComplexityClass(i, name, infer_band(groups[name]), frozenset(groups[name]))
        for i, name in enumerate(order)
    ]
    return ClassMapping(classes)


_DEFAULT = None


def default_mapping() -> ClassMapping:
    """The mapping shipped as ``data/class_mapping.json``."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("dualpilot").joinpath("data/class_mapping.json").read_text("utf-8")
        _DEFAULT = ClassMapping.from_json(json.loads(text))
    return _DEFAULT


def consolidate(label: ComplexityLabel, mapping: ClassMapping | None = None) -> ComplexityClass:
    return (mapping or default_mapping()).consolidate(label)


def route_label(label: ComplexityLabel) -> RoutingAction:
    """Deterministic label -> action rule used to build supervised targets.

    Precedence: cross-meeting context first, then high load or expert
    knowledge, then the simple case; everything else goes to the plain
    Planner.
    """
    if label.cd is CD.CROSS_MEETING:
        return RoutingAction.SLOW_CROSS
    if label.cl is CL.HIGH or label.dk is DK.EXPERT:
        return RoutingAction.SLOW_RAG
    if label.cl is CL.LOW and label.cd is CD.NONE:
        return RoutingAction.FAST
    return RoutingAction.SLOW


@dataclass(frozen=True)
class ClassDistribution:
    weights: Mapping[str, float]

    def __post_init__(self):
        if not self.weights:
            raise BadDistribution("empty distribution")
        vals = np.array(list(self.weights.values()), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise BadDistribution(f"weights must be finite and non-negative: {dict(self.weights)}")
        if abs(vals.sum() - 1.0) > 1e-9:
            raise BadDistribution(f"weights sum to {vals.sum()!r}, not 1")

    @classmethod
    def default(cls):
        return cls(dict(DEFAULT_BAND_WEIGHTS))

    def keys(self):
        return list(self.weights)

    def probs(self, keys=None):
        keys = keys or self.keys()
        return np.array([self.weights.get(k, 0.0) for k in keys], dtype=float)


def sample_band(dist: ClassDistribution, rng: np.random.Generator, size=None):
    keys = dist.keys()
    idx = rng.choice(len(keys), size=size, p=dist.probs(keys))
    if size is None:
        return keys[int(idx)]
    return [keys[i] for i in idx]


def sample_class(dist: ClassDistribution, rng: np.random.Generator, mapping: ClassMapping | None = None):
    """Draw a key with probability proportional to its weight.

    With a mapping, keys are bands and the returned value is a class drawn
    uniformly within the band. Without one the drawn key itself is returned.
    """
    key = sample_band(dist, rng)
    if mapping is None:
        return key
    members = mapping.classes_in_band(key)
    if not members:
        raise InvalidMapping(f"no class in band {key!r}")
    return members[int(rng.integers(len(members)))]


@functools.lru_cache(maxsize=None)
def _sorted_cells(cells: frozenset) -> tuple:
    return tuple(sorted(cells))


def sample_label(cls: ComplexityClass, rng: np.random.Generator) -> ComplexityLabel:
    """Uniform cell within a class (cells in canonical order)."""
    cells = _sorted_cells(cls.cells)
    return cells[int(rng.integers(len(cells)))]
