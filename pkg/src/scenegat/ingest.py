"""JSON-lines scene-graph ingestion, splits, stratified folds, confidence filtering.

One record per line::

    {"graph_id": str, "label": str|null, "subset": str|null, "width": int, "height": int,
     "objects": [{"id": int, "label": str, "bbox": [x1, y1, x2, y2], "score": float}],
     "relations": [{"subj": int, "pred": str, "obj": int, "score": float}]}

Boxes are in pixels of a ``width`` x ``height`` image; scores default to 1.0.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .graph import (
    ClassLabelSet,
    ObjectNode,
    RelationEdge,
    SceneGraph,
    Vocabulary,
    normalize_bbox,
    validate_graph,
)
from .numerics import make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    graphs: list[SceneGraph]
    class_set: ClassLabelSet
    source: str | None = None
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for g in self.graphs:
            if g.graph_id in seen:
                raise DataError(f"duplicate graph_id {g.graph_id!r}")
            seen.add(g.graph_id)
            if g.label is not None and not 0 <= g.label < len(self.class_set):
                raise DataError(f"label index {g.label} out of range for graph {g.graph_id!r}")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def by_id(self) -> dict[str, SceneGraph]:
        return {g.graph_id: g for g in self.graphs}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        index = self.by_id()
        missing = [i for i in ids if i not in index]
        if missing:
            raise DataError(f"unknown graph ids: {missing[:5]}")
        return DatasetManifest([index[i] for i in ids], self.class_set, self.source)

    def with_graphs(self, graphs: list[SceneGraph]) -> "DatasetManifest":
        return DatasetManifest(graphs, self.class_set, self.source)


def _require(rec: dict, key: str, where: str):
    if key not in rec:
        raise DataError(f"{where}: missing required field {key!r}")
    return rec[key]


def _finite(value, what: str, where: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{where}: {what} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: {what} is not finite")
    return v


def parse_graph_record(line: str | dict, vocab: Vocabulary, classes: ClassLabelSet, line_no: int | None = None) -> SceneGraph:
    """Parse and validate one record (a JSON line or an already-decoded dict)."""
    where = f"line {line_no}" if line_no is not None else "record"
    if isinstance(line, dict):
        rec = line
    else:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DataError(f"{where}: expected a JSON object")
    graph_id = str(_require(rec, "graph_id", where))
    width = _require(rec, "width", where)
    height = _require(rec, "height", where)
    objects = _require(rec, "objects", where)
    relations = rec.get("relations") or []
    if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
        raise DataError(f"{where}: width/height must be positive integers")

    nodes = []
    for i, obj in enumerate(objects):
        ow = f"{where}, objects[{i}]"
        bbox = _require(obj, "bbox", ow)
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise DataError(f"{ow}: bbox must be a list of 4 numbers")
        bbox = [_finite(v, "bbox coordinate", ow) for v in bbox]
        node_id = _require(obj, "id", ow)
        if not isinstance(node_id, int) or node_id < 0:
            raise DataError(f"{ow}: id must be a non-negative integer")
        nodes.append(
            ObjectNode(
                node_id=node_id,
                label_index=vocab.lookup_object(str(_require(obj, "label", ow))),
                bbox=normalize_bbox(bbox, width, height),
                confidence=_finite(obj.get("score", 1.0), "score", ow),
            )
        )
    edges = []
    for i, r in enumerate(relations):
        rw = f"{where}, relations[{i}]"
        edges.append(
            RelationEdge(
                subject_id=_require(r, "subj", rw),
                predicate_index=vocab.lookup_relation(str(_require(r, "pred", rw))),
                object_id=_require(r, "obj", rw),
                confidence=_finite(r.get("score", 1.0), "score", rw),
            )
        )
    label = rec.get("label")
    try:
        return validate_graph(
            SceneGraph(
                graph_id=graph_id,
                nodes=tuple(nodes),
                edges=tuple(edges),
                label=None if label is None else classes.index(str(label)),
                subset_tag=rec.get("subset"),
            )
        )
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def serialize_graph(g: SceneGraph, vocab: Vocabulary, classes: ClassLabelSet | None = None,
                    width: int = 1, height: int = 1) -> dict:
    """Inverse of :func:`parse_graph_record`.

    Boxes are scaled back to a ``width`` x ``height`` canvas; the default
    unit canvas makes the round trip exact for any box.
    """
    def px(b):
        x1, y1, x2, y2 = b
        return [x1 * width, y1 * height, x2 * width, y2 * height]

    return {
        "graph_id": g.graph_id,
        "label": None if g.label is None or classes is None else classes.names[g.label],
        "subset": g.subset_tag,
        "width": width,
        "height": height,
        "objects": [
            {"id": n.node_id, "label": vocab.object_label(n.label_index), "bbox": px(n.bbox), "score": n.confidence}
            for n in g.nodes
        ],
        "relations": [
            {"subj": e.subject_id, "pred": vocab.relation_label(e.predicate_index), "obj": e.object_id, "score": e.confidence}
            for e in g.edges
        ],
    }


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def infer_class_set(path) -> ClassLabelSet:
    """Sorted distinct non-null labels of a .jsonl file."""
    names = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for line in lines:
        if line.strip():
            try:
                label = json.loads(line).get("label")
            except (json.JSONDecodeError, AttributeError):
                continue
            if label is not None:
                names.add(str(label))
    if len(names) < 2:
        raise DataError(f"{path}: need at least two distinct class labels, found {sorted(names)}")
    return ClassLabelSet(tuple(sorted(names)))


def load_manifest(path, vocab: Vocabulary, classes: ClassLabelSet, strict: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    graphs, bad = [], []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            graphs.append(parse_graph_record(line, vocab, classes, line_no))
        except DataError as exc:
            bad.append((line_no, str(exc)))
    if bad and strict:
        listing = "; ".join(msg for _, msg in bad[:10])
        raise DataError(f"{path}: {len(bad)} bad line(s): {listing}")
    if bad:
        log.warning("%s: %d skipped", path, len(bad))
    log.info("%s: parsed %d graphs", path, len(graphs))
    return DatasetManifest(graphs, classes, str(path), skipped=bad)


def load_splits(path) -> dict[str, list[str]]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read splits file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError("splits file must hold a JSON object")
    unknown = set(raw) - set(SPLITS)
    if unknown:
        raise DataError(f"unknown split name(s) {sorted(unknown)}")
    splits = {k: [str(x) for x in raw.get(k, [])] for k in SPLITS}
    seen: dict[str, str] = {}
    for name, ids in splits.items():
        for gid in ids:
            if gid in seen:
                raise DataError(f"graph {gid!r} in both {seen[gid]} and {name}")
            seen[gid] = name
    return splits


def split_manifest(manifest: DatasetManifest, splits: dict[str, list[str]]) -> dict[str, DatasetManifest]:
    return {name: manifest.subset(ids) for name, ids in splits.items()}


def filter_by_confidence(g: SceneGraph, tau: float) -> SceneGraph:
    """Drop triplets scored below ``tau``, then nodes below ``tau`` left without edges."""
    if not 0.0 <= tau <= 1.0:
        raise DataError(f"confidence threshold must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return g
    edges = tuple(e for e in g.edges if e.confidence >= tau)
    touched = {i for e in edges for i in (e.subject_id, e.object_id)}
    nodes = tuple(n for n in g.nodes if n.confidence >= tau or n.node_id in touched)
    return validate_graph(replace(g, nodes=nodes, edges=edges))


def filter_manifest(manifest: DatasetManifest, tau: float) -> tuple[DatasetManifest, int]:
    """Apply the filter per graph; graphs it would empty are kept unfiltered.

    Returns the filtered manifest and the number of such fallbacks.
    """
    if tau == 0.0:
        return manifest, 0
    out, fallbacks = [], 0
    for g in manifest.graphs:
        try:
            out.append(filter_by_confidence(g, tau))
        except DataError:
            out.append(g)
            fallbacks += 1
    if fallbacks:
        log.warning("confidence filter tau=%s would empty %d graph(s); kept unfiltered", tau, fallbacks)
    return manifest.with_graphs(out), fallbacks


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: dict[str, int]

    def fold_ids(self, i: int) -> list[str]:
        return [gid for gid, f in self.folds.items() if f == i]

    def split(self, manifest: DatasetManifest, i: int) -> tuple[DatasetManifest, DatasetManifest]:
        """(training part, held-out fold ``i``), both in manifest order."""
        train = [g for g in manifest.graphs if self.folds[g.graph_id] != i]
        held = [g for g in manifest.graphs if self.folds[g.graph_id] == i]
        return manifest.with_graphs(train), manifest.with_graphs(held)


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class with a seeded stream and deal members round-robin into ``k`` folds.

    The dealing offset rotates between classes so fold sizes also stay
    within one of each other overall.
    """
    if k < 2:
        raise DataError("k must be at least 2")
    by_class: dict[int, list[str]] = {}
    for g in manifest.graphs:
        if g.label is None:
            raise DataError(f"unlabeled graph {g.graph_id!r} cannot be stratified")
        by_class.setdefault(g.label, []).append(g.graph_id)
    for c, ids in sorted(by_class.items()):
        if len(ids) < k:
            name = manifest.class_set.names[c]
            raise DataError(f"stratification error: class {name!r} has {len(ids)} member(s) < k={k}")
    rng = make_rng(seed, "folds")
    folds: dict[str, int] = {}
    start = 0
    for c in sorted(by_class):
        ids = by_class[c]
        order = rng.permutation(len(ids))
        for j, pos in enumerate(order):
            folds[ids[pos]] = (start + j) % k
        start = (start + len(ids)) % k
    ordered = {g.graph_id: folds[g.graph_id] for g in manifest.graphs}
    return FoldPlan(k=k, seed=seed, folds=ordered)


def class_counts(graphs: Sequence[SceneGraph], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for g in graphs:
        if g.label is not None:
            counts[g.label] += 1
    return counts
