"""Scene-graph domain types: vocabularies, class label sets, graphs.

Everything here is immutable after construction. Graphs carry only
symbolic content (label indices, normalized boxes, confidences); there is
no place for pixel data.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

UNK_OBJ = "[unk_obj]"
UNK_REL = "[unk_rel]"
SELF_LOOP = "[self_loop]"
RESERVED = (UNK_OBJ, UNK_REL, SELF_LOOP)


def normalize_label(label: str) -> str:
    return " ".join(str(label).lower().split())


class Vocabulary:
    """Closed object/relation label tables with reserved tokens appended.

    Object indices ``0..n_obj-1`` are real labels and ``n_obj`` is
    ``[unk_obj]``. Relation indices ``0..n_rel-1`` are real predicates,
    followed by ``[unk_rel]`` and ``[self_loop]``.
    """

    def __init__(self, object_labels: Sequence[str], relation_labels: Sequence[str]):
        objs = [normalize_label(x) for x in object_labels]
        rels = [normalize_label(x) for x in relation_labels]
        for name, table in (("object", objs), ("relation", rels)):
            if any(not x for x in table):
                raise DataError(f"empty {name} label in vocabulary")
            if len(set(table)) != len(table):
                raise DataError(f"duplicate {name} labels in vocabulary")
            clash = set(table) & set(RESERVED)
            if clash:
                raise DataError(f"reserved token(s) {sorted(clash)} present in {name} labels")
        self._objects = tuple(objs) + (UNK_OBJ,)
        self._relations = tuple(rels) + (UNK_REL, SELF_LOOP)
        self._obj_index = {x: i for i, x in enumerate(objs)}
        self._rel_index = {x: i for i, x in enumerate(rels)}
        self.unk_obj = len(objs)
        self.unk_rel = len(rels)
        self.self_loop = len(rels) + 1

    @classmethod
    def from_files(cls, objects_path, relations_path) -> "Vocabulary":
        return cls(_read_lines(Path(objects_path)), _read_lines(Path(relations_path)))

    @classmethod
    def vg150(cls) -> "Vocabulary":
        """The 150-object / 50-predicate Visual Genome label space shipped with the package."""
        data = resources.files("scenegat") / "data"
        objs = (data / "vg150_objects.txt").read_text(encoding="utf-8").splitlines()
        rels = (data / "vg150_relations.txt").read_text(encoding="utf-8").splitlines()
        return cls([x for x in objs if x.strip()], [x for x in rels if x.strip()])

    @property
    def num_objects(self) -> int:
        return len(self._objects)

    @property
    def num_relations(self) -> int:
        return len(self._relations)

    @property
    def object_labels(self) -> tuple[str, ...]:
        return self._objects

    @property
    def relation_labels(self) -> tuple[str, ...]:
        return self._relations

    def lookup_object(self, label: str) -> int:
        return self._obj_index.get(normalize_label(label), self.unk_obj)

    def lookup_relation(self, label: str) -> int:
        return self._rel_index.get(normalize_label(label), self.unk_rel)

    def object_label(self, index: int) -> str:
        return self._objects[index]

    def relation_label(self, index: int) -> str:
        return self._relations[index]

    def object_hash(self) -> str:
        return _hash_table(self._objects)

    def relation_hash(self) -> str:
        return _hash_table(self._relations)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and (
            self._objects == other._objects and self._relations == other._relations
        )

    def __hash__(self):
        return hash((self._objects, self._relations))

    def __repr__(self):
        return f"Vocabulary({self.num_objects} objects, {self.num_relations} relations)"


def lookup_object(vocab: Vocabulary, label: str) -> int:
    return vocab.lookup_object(label)


def lookup_relation(vocab: Vocabulary, label: str) -> int:
    return vocab.lookup_relation(label)


def _hash_table(labels: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(labels).encode("utf-8")).hexdigest()


def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [line for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class ClassLabelSet:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise DataError("a class label set needs at least 2 classes")
        if len(set(names)) != len(names):
            raise DataError("duplicate class names")

    @classmethod
    def from_file(cls, path) -> "ClassLabelSet":
        return cls(tuple(_read_lines(Path(path))))

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown class label {name!r}") from None


@dataclass(frozen=True)
class ObjectNode:
    node_id: int
    label_index: int
    bbox: tuple[float, float, float, float]
    confidence: float = 1.0


@dataclass(frozen=True)
class RelationEdge:
    subject_id: int
    predicate_index: int
    object_id: int
    confidence: float = 1.0

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.subject_id, self.predicate_index, self.object_id)


@dataclass(frozen=True)
class SceneGraph:
    graph_id: str
    nodes: tuple[ObjectNode, ...]
    edges: tuple[RelationEdge, ...] = ()
    label: int | None = None
    subset_tag: str | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def normalize_bbox(bbox_px: Sequence[float], width: int, height: int) -> tuple[float, float, float, float]:
    """Pixel box to unit-square box; corners swapped into order, then clamped."""
    if width <= 0 or height <= 0:
        raise DataError(f"image size must be positive, got {width}x{height}")
    if len(bbox_px) != 4:
        raise DataError(f"bbox must have 4 coordinates, got {len(bbox_px)}")
    x1, y1, x2, y2 = (float(v) for v in bbox_px)
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise DataError(f"non-finite bbox {list(bbox_px)}")
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    return (_clamp01(x1 / width), _clamp01(y1 / height), _clamp01(x2 / width), _clamp01(y2 / height))


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def validate_graph(raw: SceneGraph) -> SceneGraph:
    """Compact node ids to ``0..n-1``, drop duplicate triplets, check references.

    Duplicate (subject, predicate, object) triplets collapse onto the first
    occurrence and keep the highest confidence. Idempotent.
    """
    if not raw.nodes:
        raise DataError(f"empty graph: {raw.graph_id!r} has no nodes")
    ids = [n.node_id for n in raw.nodes]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate node ids in graph {raw.graph_id!r}")
    remap = {old: new for new, old in enumerate(sorted(ids))}
    dangling = sorted(
        {i for e in raw.edges for i in (e.subject_id, e.object_id) if i not in remap}
    )
    if dangling:
        raise DataError(f"dangling reference in graph {raw.graph_id!r}: node ids {dangling}")

    nodes = []
    for n in sorted(raw.nodes, key=lambda n: n.node_id):
        _check_node(raw.graph_id, n)
        nodes.append(replace(n, node_id=remap[n.node_id]))

    merged: dict[tuple[int, int, int], RelationEdge] = {}
    for e in raw.edges:
        if not 0.0 <= e.confidence <= 1.0:
            raise DataError(f"edge confidence {e.confidence} outside [0,1] in {raw.graph_id!r}")
        e = replace(e, subject_id=remap[e.subject_id], object_id=remap[e.object_id])
        prev = merged.get(e.triplet)
        if prev is None:
            merged[e.triplet] = e
        elif e.confidence > prev.confidence:
            merged[e.triplet] = replace(prev, confidence=e.confidence)
    return replace(raw, nodes=tuple(nodes), edges=tuple(merged.values()))


def _check_node(graph_id: str, n: ObjectNode) -> None:
    x1, y1, x2, y2 = n.bbox
    if not all(0.0 <= v <= 1.0 for v in n.bbox) or x1 > x2 or y1 > y2:
        raise DataError(f"invalid normalized bbox {n.bbox} for node {n.node_id} in {graph_id!r}")
    if not 0.0 <= n.confidence <= 1.0:
        raise DataError(f"node confidence {n.confidence} outside [0,1] in {graph_id!r}")
