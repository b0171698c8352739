"""Confidence-threshold ablation under injected hallucinations.

Clean synthetic graphs get confident hallucinated triplets, then each
threshold ``tau`` filters the data. The harness reports how many injected
triplets survive each filter and, optionally, the test balanced accuracy of
a model trained and evaluated at that threshold, with deltas against the
first threshold.
"""
from __future__ import annotations

from dataclasses import replace

from .graph import SceneGraph, Vocabulary
from .ingest import filter_by_confidence, filter_manifest, split_manifest
from .model import ModelConfig
from .numerics import make_rng
from .synthgen import GeneratorSpec, generate_dataset, inject_hallucination
from .train import TrainConfig, evaluate, train


def _node_key(g: SceneGraph, node_id: int) -> tuple:
    n = g.nodes[node_id]
    return (n.label_index, n.bbox, n.confidence)


def _triplet_key(g: SceneGraph, edge) -> tuple:
    return (_node_key(g, edge.subject_id), edge.predicate_index, _node_key(g, edge.object_id))


def inject_all(graphs, rate: float, seed: int, predicates, confidence: float = 0.9):
    """Inject into every graph; returns (graphs, {graph_id: injected triplet key}).

    Triplets are keyed by node content, not ids, because filtering
    renumbers nodes.
    """
    out, injected = [], {}
    for i, g in enumerate(graphs):
        h = inject_hallucination(g, rate, make_rng(seed, "generator", i, 1), predicates, confidence)
        if h.num_edges > g.num_edges:
            injected[h.graph_id] = _triplet_key(h, h.edges[-1])
        out.append(h)
    return out, injected


def surviving(graphs, injected: dict, tau: float) -> int:
    """Count injected triplets still present after ``filter_by_confidence(g, tau)``."""
    kept = 0
    for g in graphs:
        key = injected.get(g.graph_id)
        if key is None:
            continue
        f = filter_by_confidence(g, tau)
        if any(_triplet_key(f, e) == key for e in f.edges):
            kept += 1
    return kept


def hallucination_ablation(
    spec: GeneratorSpec,
    taus=(0.0, 0.5, 0.8),
    rate: float = 0.3,
    confidence: float = 0.9,
    *,
    train_config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    vocab: Vocabulary | None = None,
    with_accuracy: bool = True,
) -> dict:
    """Per tau: injected triplets removed, and optionally test balanced accuracy.

    Accuracy deltas are relative to the first entry of ``taus``.
    """
    vocab = vocab or Vocabulary.vg150()
    manifest, splits, _ = generate_dataset(replace(spec, hallucination_rate=0.0), vocab)
    predicates = sorted({vocab.lookup_relation(p) for p in spec.background["predicates"]})
    graphs, injected = inject_all(manifest.graphs, rate, spec.seed, predicates, confidence)
    noisy = manifest.with_graphs(graphs)
    parts = split_manifest(noisy, splits)
    rows = []
    for tau in taus:
        kept = surviving(graphs, injected, tau)
        row = {
            "tau": float(tau),
            "injected": len(injected),
            "surviving": kept,
            "removed_fraction": 0.0 if not injected else 1.0 - kept / len(injected),
        }
        if with_accuracy:
            cfg = replace(train_config or TrainConfig.places8(), confidence_tau=float(tau))
            ckpt = train(parts["train"], parts["val"], cfg, model_config=model_config, vocab=vocab)
            test, _ = filter_manifest(parts["test"], float(tau))
            row["test_balanced_accuracy"] = evaluate(ckpt, test).balanced_accuracy
        rows.append(row)
    if with_accuracy:
        base = rows[0]["test_balanced_accuracy"]
        for r in rows:
            r["accuracy_delta"] = r["test_balanced_accuracy"] - base
    return {"rate": rate, "confidence": confidence, "rows": rows}
