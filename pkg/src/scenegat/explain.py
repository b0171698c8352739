"""Attention-based attributions per image and per class.

Node importance is the attention-pooling weight; edge importance is the
head-mean attention of one GATv2 layer (the last by default). Self-loops
carry attention internally but are never reported, since they are not
part of the scene.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import DataError
from .graph import SceneGraph, Vocabulary
from .model import AttentionRecord, GraphEncoder
from .train import predict_logits

log = logging.getLogger(__name__)


@dataclass
class NodeImportance:
    node_id: int
    label: str
    importance: float


@dataclass
class EdgeImportance:
    subject_id: int
    subject: str
    predicate: str
    object_id: int
    object: str
    importance: float


@dataclass
class AttributionReport:
    graph_id: str
    predicted: int
    true: int | None
    nodes: list[NodeImportance]
    edges: list[EdgeImportance]

    def to_dict(self, class_names=None) -> dict:
        name = (lambda i: None if i is None else class_names[i]) if class_names else (lambda i: i)
        return {
            "graph_id": self.graph_id,
            "predicted": name(self.predicted),
            "true": name(self.true),
            "nodes": [vars(n) for n in self.nodes],
            "edges": [vars(e) for e in self.edges],
        }


def edge_importance(record: AttentionRecord, layer: int = -1, head: int | None = None) -> np.ndarray:
    att = record.attention[layer]
    return att.mean(axis=1) if head is None else att[:, head]


def per_image_attribution(record: AttentionRecord, g: SceneGraph, vocab: Vocabulary, layer: int = -1,
                          head: int | None = None) -> AttributionReport:
    if record.num_nodes != g.num_nodes:
        raise DataError(f"attention record has {record.num_nodes} nodes but graph {g.graph_id!r} has {g.num_nodes}")
    nodes = [
        NodeImportance(n.node_id, vocab.object_label(n.label_index), float(w))
        for n, w in zip(g.nodes, record.pooling)
    ]
    imp = edge_importance(record, layer, head)
    labels = [vocab.object_label(n.label_index) for n in g.nodes]
    edges = [
        EdgeImportance(int(s), labels[s], vocab.relation_label(int(r)), int(o), labels[o], float(a))
        for s, o, r, a, loop in zip(record.src, record.dst, record.rel, imp, record.is_self_loop)
        if not loop
    ]
    nodes.sort(key=lambda n: (-n.importance, n.label, n.node_id))
    edges.sort(key=lambda e: (-e.importance, e.subject, e.predicate, e.object, e.subject_id, e.object_id))
    return AttributionReport(g.graph_id, record.predicted, g.label, nodes, edges)


@dataclass
class ClassImportanceTable:
    """Per class: label -> [accumulated score, support (number of images)]."""

    class_names: list[str]
    objects: list[dict] = field(default_factory=list)
    relations: list[dict] = field(default_factory=list)
    images: list[int] = field(default_factory=list)
    mode: str = "sum"

    def __post_init__(self):
        k = len(self.class_names)
        self.objects = self.objects or [defaultdict(lambda: [0.0, 0]) for _ in range(k)]
        self.relations = self.relations or [defaultdict(lambda: [0.0, 0]) for _ in range(k)]
        self.images = self.images or [0] * k

    def add(self, cls: int, report: AttributionReport) -> None:
        self.images[cls] += 1
        for table, items in ((self.objects[cls], [(n.label, n.importance) for n in report.nodes]),
                             (self.relations[cls], [(e.predicate, e.importance) for e in report.edges])):
            seen = set()
            for label, score in items:
                entry = table[label]
                entry[0] += score
                if label not in seen:
                    entry[1] += 1
                    seen.add(label)

    def __add__(self, other: "ClassImportanceTable") -> "ClassImportanceTable":
        if self.class_names != other.class_names:
            raise DataError("cannot merge tables over different class sets")
        out = ClassImportanceTable(list(self.class_names), mode=self.mode)
        for src in (self, other):
            for c in range(len(self.class_names)):
                out.images[c] += src.images[c]
                for mine, theirs in ((out.objects[c], src.objects[c]), (out.relations[c], src.relations[c])):
                    for label, (score, sup) in theirs.items():
                        mine[label][0] += score
                        mine[label][1] += sup
        return out

    def ranked(self, cls: int, kind: str = "objects") -> list[tuple[str, float, int]]:
        """(label, score, support) by descending score, ties broken by label."""
        table = self.objects[cls] if kind == "objects" else self.relations[cls]
        div = self.images[cls] if self.mode == "mean" and self.images[cls] else 1
        rows = [(label, score / div, sup) for label, (score, sup) in table.items()]
        rows.sort(key=lambda r: (-r[1], r[0]))
        return rows


def aggregate_importance(graphs, ckpt: Checkpoint, vocab: Vocabulary, only_correct: bool = True, layer: int = -1,
                         head: int | None = None, mode: str = "sum", batch_size: int = 64) -> ClassImportanceTable:
    """Accumulate attributions under each graph's true class.

    With ``only_correct`` misclassified graphs are skipped. ``mode="mean"``
    divides accumulated scores by the number of contributing images.
    """
    if mode not in ("sum", "mean"):
        raise ValueError("mode must be 'sum' or 'mean'")
    graphs = [g for g in graphs if g.label is not None]
    table = ClassImportanceTable(list(ckpt.class_names), mode=mode)
    if not graphs:
        return table
    enc = GraphEncoder(ckpt.model_config.self_loop_index)
    _, records = predict_logits(graphs, ckpt.params, ckpt.model_config, batch_size, enc, with_records=True)
    for g, rec in zip(graphs, records):
        if only_correct and rec.predicted != g.label:
            continue
        table.add(g.label, per_image_attribution(rec, g, vocab, layer, head))
    for c, n in enumerate(table.images):
        if n == 0:
            log.warning("class %r has no contributing images; its table rows are empty", table.class_names[c])
    return table


def render_tables(table: ClassImportanceTable, top_objects: int = 10, top_relations: int = 5) -> tuple[str, list[dict]]:
    """Text table (one row per class) and JSON-ready list of the same top-K rows."""
    payload = []
    lines = []
    width = max(len(n) for n in table.class_names)
    lines.append(f"{'class'.ljust(width)} | top-{top_objects} objects | top-{top_relations} relations")
    for c, name in enumerate(table.class_names):
        objs = table.ranked(c, "objects")[:top_objects]
        rels = table.ranked(c, "relations")[:top_relations]
        payload.append({
            "class": name,
            "images": table.images[c],
            "objects": [{"label": l, "score": s, "support": n} for l, s, n in objs],
            "relations": [{"label": l, "score": s, "support": n} for l, s, n in rels],
        })
        lines.append(f"{name.ljust(width)} | {', '.join(r[0] for r in objs)} | {', '.join(r[0] for r in rels)}")
    return "\n".join(lines), payload


def parse_rendered_table(text: str) -> dict[str, tuple[list[str], list[str]]]:
    """Read back the text produced by :func:`render_tables`."""
    out = {}
    for line in text.splitlines()[1:]:
        name, objs, rels = (part.strip() for part in line.split(" | "))
        out[name] = ([x for x in objs.split(", ") if x], [x for x in rels.split(", ") if x])
    return out


def tables_to_json(payload: list[dict]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True)
