"""Gold label sets and multi-annotator merging."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Union

from ..cli.RunArtifacts import GoldLine, read_jsonl
from ..core.Errors import MetaEvalError

LOGGER = logging.getLogger(__name__)

UNIT_KINDS = ("sentence", "fact", "response")


@dataclass(frozen=True)
class GoldItem:
    unit_id: str
    unit_kind: str
    gold: Any
    annotator_id: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {"unit_id": self.unit_id, "unit_kind": self.unit_kind, "gold": self.gold,
                "annotator_id": self.annotator_id}


@dataclass(frozen=True)
class GoldLabelSet:
    """Items sorted by unit_id; ids are unique and share one unit kind."""

    unit_kind: str
    items: tuple = ()

    def __post_init__(self):
        if self.unit_kind not in UNIT_KINDS:
            raise MetaEvalError(f"Unknown unit kind {self.unit_kind!r}")
        seen = set()
        for item in self.items:
            if item.unit_kind != self.unit_kind:
                raise MetaEvalError(f"Unit {item.unit_id} is a {item.unit_kind}, expected {self.unit_kind}")
            if item.unit_id in seen:
                raise MetaEvalError(f"Duplicate unit id {item.unit_id}")
            seen.add(item.unit_id)
        object.__setattr__(self, "items", tuple(sorted(self.items, key=lambda i: i.unit_id)))

    @classmethod
    def from_items(cls, items: Iterable[GoldItem], unit_kind: Optional[str] = None) -> "GoldLabelSet":
        items = list(items)
        kinds = {item.unit_kind for item in items}
        if unit_kind is None:
            if len(kinds) != 1:
                raise MetaEvalError(f"Gold labels mix unit kinds {sorted(kinds)}" if kinds
                                    else "Empty gold label set needs an explicit unit kind")
            unit_kind = kinds.pop()
        return cls(unit_kind, tuple(items))

    def ids(self) -> List[str]:
        return [item.unit_id for item in self.items]

    def by_id(self) -> Dict[str, GoldItem]:
        return {item.unit_id: item for item in self.items}

    def subset(self, keep: Callable[[str], bool]) -> "GoldLabelSet":
        return GoldLabelSet(self.unit_kind, tuple(i for i in self.items if keep(i.unit_id)))

    def positives(self) -> set:
        return {item.unit_id for item in self.items if item.gold is True}

    def is_boolean(self) -> bool:
        return all(isinstance(item.gold, bool) for item in self.items)

    def to_lines(self) -> List[Dict[str, Any]]:
        return [item.to_dict() for item in self.items]


def load_gold_labels(path: Union[str, Path]) -> GoldLabelSet:
    lines = read_jsonl(path, GoldLine)
    return GoldLabelSet.from_items(GoldItem(line.unit_id, line.unit_kind, line.gold, line.annotator_id)
                                   for line in lines)


def _require_boolean(*sets: GoldLabelSet) -> None:
    for labels in sets:
        if not labels.is_boolean():
            raise MetaEvalError("Annotation merging and agreement need boolean labels")
    kinds = {labels.unit_kind for labels in sets}
    if len(kinds) > 1:
        raise MetaEvalError(f"Unit kind mismatch: {sorted(kinds)}")


def merge_annotations_union(a: GoldLabelSet, b: GoldLabelSet) -> GoldLabelSet:
    """OR-gate: a unit is positive when any annotator marked it positive."""
    _require_boolean(a, b)
    merged = {item.unit_id: item.gold for item in a.items}
    for item in b.items:
        merged[item.unit_id] = merged.get(item.unit_id, False) or item.gold
    return GoldLabelSet(a.unit_kind, tuple(GoldItem(unit_id, a.unit_kind, label, "union")
                                           for unit_id, label in merged.items()))


def agreement(a: GoldLabelSet, b: GoldLabelSet) -> float:
    """Raw percent agreement over shared units."""
    _require_boolean(a, b)
    labels_b = {item.unit_id: item.gold for item in b.items}
    shared = [(item.gold, labels_b[item.unit_id]) for item in a.items if item.unit_id in labels_b]
    if not shared:
        raise MetaEvalError("No shared units between the two annotation sets")
    LOGGER.debug("Agreement over %d shared units", len(shared))
    return sum(x == y for x, y in shared) / len(shared)
