"""Class-conditional synthetic scene graphs.

Each class has an object-label and a predicate distribution; ``separation``
mixes them with a shared background profile (1.0 = pure class profile,
0.0 = every class identical). Noise is applied last: corruption of object
labels to ``[unk_obj]`` and confident hallucinated triplets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import ClassLabelSet, ObjectNode, RelationEdge, SceneGraph, Vocabulary, validate_graph
from .ingest import DatasetManifest, parse_graph_record, serialize_graph, write_jsonl
from .numerics import make_rng

CANVAS = 256


@dataclass(frozen=True)
class ClassProfile:
    name: str
    objects: dict
    predicates: dict
    node_range: tuple[int, int] | None = None
    edge_density: tuple[float, float] | None = None


def _signature_profile(name, signature, shared, predicates):
    objects = {o: 0.2 for o in signature}
    objects.update({o: 0.1 for o in shared})
    return ClassProfile(name, objects, predicates)


DEFAULT_BACKGROUND = {
    "objects": {o: 0.1 for o in ("window", "chair", "table", "door", "man", "woman", "person", "shelf", "room", "light")},
    "predicates": {"on": 0.25, "has": 0.25, "near": 0.2, "with": 0.15, "in front of": 0.15},
}

# Four class-exclusive signature objects each; shared objects come from the background set.
DEFAULT_PROFILES = (
    _signature_profile("bathroom", ("sink", "toilet", "towel", "tile"), ("door", "shelf"),
                       {"has": 0.4, "on": 0.3, "near": 0.3}),
    _signature_profile("bedroom", ("bed", "pillow", "curtain", "lamp"), ("window", "table"),
                       {"on": 0.4, "near": 0.3, "has": 0.3}),
    _signature_profile("child's room", ("bear", "flower", "box", "kite"), ("window", "chair"),
                       {"with": 0.4, "on": 0.3, "near": 0.3}),
    _signature_profile("classroom", ("desk", "board", "book", "paper"), ("man", "chair"),
                       {"sitting on": 0.4, "in front of": 0.3, "has": 0.3}),
    _signature_profile("dressing room", ("jacket", "coat", "bag", "shoe"), ("shelf", "woman"),
                       {"hanging from": 0.4, "on": 0.3, "under": 0.3}),
    _signature_profile("living room", ("vase", "plant", "clock", "screen"), ("table", "window"),
                       {"on": 0.4, "in front of": 0.3, "near": 0.3}),
    _signature_profile("studio", ("hair", "face", "hat", "tie"), ("person", "light"),
                       {"wearing": 0.4, "holding": 0.3, "has": 0.3}),
    _signature_profile("swimming pool", ("pole", "tree", "building", "umbrella"), ("person", "door"),
                       {"near": 0.4, "above": 0.3, "along": 0.3}),
)


def _check_distribution(dist: dict, what: str) -> None:
    if not dist:
        raise DataError(f"{what}: empty distribution")
    vals = list(dist.values())
    if any((not math.isfinite(v)) or v < 0 for v in vals):
        raise DataError(f"{what}: probabilities must be finite and non-negative")
    if abs(sum(vals) - 1.0) > 1e-9:
        raise DataError(f"{what}: probabilities sum to {sum(vals)!r}, not 1")


@dataclass(frozen=True)
class GeneratorSpec:
    classes: tuple[ClassProfile, ...] = DEFAULT_PROFILES
    background: dict = field(default_factory=lambda: dict(DEFAULT_BACKGROUND))
    separation: float = 0.9
    node_range: tuple[int, int] = (3, 20)
    edge_density: tuple[float, float] = (0.5, 1.5)  # relation edges per node
    hallucination_rate: float = 0.0
    unk_rate: float = 0.05
    counts: dict = field(default_factory=lambda: {"train": 800, "val": 100, "test": 100})
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataError("generator needs at least 2 classes")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DataError("duplicate class names in generator spec")
        for c in self.classes:
            _check_distribution(c.objects, f"class {c.name!r} objects")
            _check_distribution(c.predicates, f"class {c.name!r} predicates")
            self._check_ranges(c.node_range or self.node_range, c.edge_density or self.edge_density)
        _check_distribution(self.background.get("objects", {}), "background objects")
        _check_distribution(self.background.get("predicates", {}), "background predicates")
        self._check_ranges(self.node_range, self.edge_density)
        for name, p in (("separation", self.separation), ("hallucination_rate", self.hallucination_rate),
                        ("unk_rate", self.unk_rate)):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {p}")
        if set(self.counts) - {"train", "val", "test"} or any(int(v) < 0 for v in self.counts.values()):
            raise DataError("counts must map train/val/test to non-negative integers")

    @staticmethod
    def _check_ranges(node_range, density):
        lo, hi = node_range
        if not 1 <= lo <= hi:
            raise DataError(f"invalid node range {node_range}")
        dlo, dhi = density
        if not 0.0 <= dlo <= dhi:
            raise DataError(f"invalid edge density range {density}")

    @property
    def class_set(self) -> ClassLabelSet:
        return ClassLabelSet(tuple(c.name for c in self.classes))

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(
                ClassProfile(
                    c["name"], dict(c["objects"]), dict(c["predicates"]),
                    tuple(c["node_range"]) if c.get("node_range") else None,
                    tuple(c["edge_density"]) if c.get("edge_density") else None,
                )
                for c in d["classes"]
            )
        for key in ("node_range", "edge_density"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"invalid generator spec: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read generator spec {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"name": c.name, "objects": c.objects, "predicates": c.predicates,
                 "node_range": list(c.node_range) if c.node_range else None,
                 "edge_density": list(c.edge_density) if c.edge_density else None}
                for c in self.classes
            ],
            "background": self.background,
            "separation": self.separation,
            "node_range": list(self.node_range),
            "edge_density": list(self.edge_density),
            "hallucination_rate": self.hallucination_rate,
            "unk_rate": self.unk_rate,
            "counts": dict(self.counts),
            "seed": self.seed,
        }


def _mixture(vocab_lookup, unk: int, profile: dict, background: dict, separation: float, size: int) -> np.ndarray:
    p = np.zeros(size)
    for dist, weight in ((profile, separation), (background, 1.0 - separation)):
        for label, w in dist.items():
            idx = vocab_lookup(label)
            if idx == unk:
                raise DataError(f"generator label {label!r} is not in the vocabulary")
            p[idx] += weight * w
    return p / p.sum()


def inject_hallucination(g: SceneGraph, rate: float, rng, predicates, confidence: float = 0.9) -> SceneGraph:
    """With probability ``rate`` append one confident triplet between two distinct random nodes.

    The predicate is drawn uniformly from ``predicates`` (indices) and the
    new triplet never duplicates an existing one, so the edge count grows
    by exactly one. Graphs with fewer than two nodes are returned as is.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"hallucination rate must lie in [0, 1], got {rate}")
    if rate == 0.0 or g.num_nodes < 2 or rng.random() >= rate:
        return g
    existing = {e.triplet for e in g.edges}
    for _ in range(1000):
        s, o = rng.choice(g.num_nodes, size=2, replace=False)
        p = predicates[int(rng.integers(len(predicates)))]
        trip = (int(s), int(p), int(o))
        if trip not in existing:
            return replace(g, edges=g.edges + (RelationEdge(trip[0], trip[1], trip[2], confidence),))
    return g


def _sample_graph(i: int, spec: GeneratorSpec, vocab: Vocabulary, mixes, bg_predicates) -> SceneGraph:
    rng = make_rng(spec.seed, "generator", i)
    label = int(rng.integers(len(spec.classes)))
    prof = spec.classes[label]
    obj_p, pred_p = mixes[label]
    lo, hi = prof.node_range or spec.node_range
    n = int(rng.integers(lo, hi + 1))
    objs = rng.choice(len(obj_p), size=n, p=obj_p)
    nodes = []
    for j in range(n):
        xs = np.sort(rng.integers(0, CANVAS + 1, size=2))
        ys = np.sort(rng.integers(0, CANVAS + 1, size=2))
        bbox = (xs[0] / CANVAS, ys[0] / CANVAS, xs[1] / CANVAS, ys[1] / CANVAS)
        nodes.append(ObjectNode(j, int(objs[j]), tuple(float(v) for v in bbox), round(float(rng.uniform(0.3, 1.0)), 6)))
    edges = []
    if n >= 2:
        dlo, dhi = prof.edge_density or spec.edge_density
        m = int(round(rng.uniform(dlo, dhi) * n))
        for _ in range(m):
            s, o = rng.choice(n, size=2, replace=False)
            p = int(rng.choice(len(pred_p), p=pred_p))
            edges.append(RelationEdge(int(s), p, int(o), round(float(rng.uniform(0.2, 1.0)), 6)))
    g = SceneGraph(f"g{i:06d}", tuple(nodes), tuple(edges), label=label)
    # noise last
    if spec.unk_rate > 0:
        g = replace(g, nodes=tuple(
            replace(nd, label_index=vocab.unk_obj) if rng.random() < spec.unk_rate else nd for nd in g.nodes
        ))
    g = inject_hallucination(g, spec.hallucination_rate, rng, bg_predicates)
    return validate_graph(g)


def generate_dataset(spec: GeneratorSpec, vocab: Vocabulary | None = None) -> tuple[DatasetManifest, dict, list[dict]]:
    """Sample the dataset; returns (manifest, splits, jsonl records).

    Records use a 256x256 canvas, so every box coordinate is an exact
    multiple of 1/256 and parsing the records reproduces the graphs exactly.
    """
    vocab = vocab or Vocabulary.vg150()
    bg = spec.background
    mixes = [
        (
            _mixture(vocab.lookup_object, vocab.unk_obj, c.objects, bg["objects"], spec.separation, vocab.num_objects),
            _mixture(vocab.lookup_relation, vocab.unk_rel, c.predicates, bg["predicates"], spec.separation,
                     vocab.num_relations),
        )
        for c in spec.classes
    ]
    bg_predicates = sorted({vocab.lookup_relation(p) for p in bg["predicates"]})
    total = sum(int(spec.counts.get(k, 0)) for k in ("train", "val", "test"))
    graphs = [_sample_graph(i, spec, vocab, mixes, bg_predicates) for i in range(total)]
    splits, start = {}, 0
    for name in ("train", "val", "test"):
        cnt = int(spec.counts.get(name, 0))
        splits[name] = [g.graph_id for g in graphs[start : start + cnt]]
        start += cnt
    classes = spec.class_set
    records = [serialize_graph(g, vocab, classes, width=CANVAS, height=CANVAS) for g in graphs]
    manifest = DatasetManifest([parse_graph_record(r, vocab, classes) for r in records], classes, None)
    return manifest, splits, records


def write_dataset(spec: GeneratorSpec, out_dir, vocab: Vocabulary | None = None) -> dict:
    """Write ``dataset.jsonl``, ``splits.json`` and ``classes.txt``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, splits, records = generate_dataset(spec, vocab)
    paths = {"data": out / "dataset.jsonl", "splits": out / "splits.json", "classes": out / "classes.txt"}
    write_jsonl(records, paths["data"])
    paths["splits"].write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["classes"].write_text("\n".join(manifest.class_set.names) + "\n", encoding="utf-8")
    return paths
