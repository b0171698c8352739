import json

import numpy as np
import pytest

from helpers import permute_graph
from scenegat.errors import DataError
from scenegat.explain import (
    ClassImportanceTable,
    aggregate_importance,
    parse_rendered_table,
    per_image_attribution,
    render_tables,
)
from scenegat.graph import ObjectNode, SceneGraph, validate_graph
from scenegat.model import forward
from scenegat.train import predict_logits


def _attr(ckpt, g, vocab):
    _, rec = forward(g, ckpt.params, ckpt.model_config)
    return per_image_attribution(rec, g, vocab)


def test_attribution_invariants(small_ckpt, small_data, vocab):
    for g in small_data[0].graphs[:30]:
        rep = _attr(small_ckpt, g, vocab)
        assert abs(sum(n.importance for n in rep.nodes) - 1) < 1e-9
        assert all(0 < e.importance <= 1 for e in rep.edges)
        assert len(rep.edges) == g.num_edges
        imps = [n.importance for n in rep.nodes]
        assert imps == sorted(imps, reverse=True)


def test_single_node_and_symmetric_nodes(small_ckpt, vocab):
    one = validate_graph(SceneGraph("one", (ObjectNode(0, 3, (0, 0, 1, 1)),)))
    rep = _attr(small_ckpt, one, vocab)
    assert [n.importance for n in rep.nodes] == [1.0] and rep.edges == []
    twins = validate_graph(SceneGraph("tw", (ObjectNode(0, 3, (0, 0, 1, 1)), ObjectNode(1, 3, (0, 0, 1, 1)))))
    rep = _attr(small_ckpt, twins, vocab)
    assert all(abs(n.importance - 0.5) < 1e-12 for n in rep.nodes)


def test_mismatch_rejected(small_ckpt, small_data, vocab):
    a, b = small_data[0].graphs[0], small_data[0].graphs[1]
    assert a.num_nodes != b.num_nodes
    _, rec = forward(a, small_ckpt.params, small_ckpt.model_config)
    with pytest.raises(DataError):
        per_image_attribution(rec, b, vocab)


def _rendering(rep, digits=9):
    return ([(n.label, round(n.importance, digits)) for n in rep.nodes],
            [(e.subject, e.predicate, e.object, round(e.importance, digits)) for e in rep.edges])


def test_permutation_keeps_rendering(small_ckpt, small_data, vocab):
    rng = np.random.default_rng(5)
    for g in small_data[0].graphs[:20]:
        perm = rng.permutation(g.num_nodes)
        h = permute_graph(g, perm)
        ra, rb = _attr(small_ckpt, g, vocab), _attr(small_ckpt, h, vocab)
        assert sorted(_rendering(ra)[0]) == sorted(_rendering(rb)[0])
        assert sorted(_rendering(ra)[1]) == sorted(_rendering(rb)[1])
        by_id = {n.node_id: n.importance for n in rb.nodes}
        for n in ra.nodes:
            assert abs(by_id[int(perm[n.node_id])] - n.importance) < 1e-9


def test_aggregation_single_graph(small_ckpt, small_data, vocab):
    graphs = small_data[0].graphs
    logits = predict_logits(graphs, small_ckpt.params, small_ckpt.model_config)
    g = next(g for g, row in zip(graphs, logits) if row.argmax() == g.label)
    table = aggregate_importance([g], small_ckpt, vocab)
    rep = _attr(small_ckpt, g, vocab)
    expected = {}
    for n in rep.nodes:
        expected[n.label] = expected.get(n.label, 0.0) + n.importance
    got = {label: score for label, score, _ in table.ranked(g.label, "objects")}
    assert got.keys() == expected.keys()
    assert all(abs(got[k] - expected[k]) < 1e-12 for k in got)
    assert table.images[g.label] == 1 and sum(table.images) == 1


def test_aggregation_linear_and_doubling(small_ckpt, small_data, vocab):
    graphs = small_data[0].graphs[:80]
    whole = aggregate_importance(graphs, small_ckpt, vocab)
    parts = aggregate_importance(graphs[:30], small_ckpt, vocab) + aggregate_importance(graphs[30:], small_ckpt, vocab)
    twice = whole + whole
    for c in range(len(whole.class_names)):
        for kind in ("objects", "relations"):
            w = {l: (s, n) for l, s, n in whole.ranked(c, kind)}
            p = {l: (s, n) for l, s, n in parts.ranked(c, kind)}
            t = twice.ranked(c, kind)
            assert w.keys() == p.keys()
            assert all(abs(w[k][0] - p[k][0]) < 1e-9 and w[k][1] == p[k][1] for k in w)
            assert [x[0] for x in t] == [x[0] for x in whole.ranked(c, kind)]
            assert all(abs(s - 2 * w[l][0]) < 1e-9 for l, s, _ in t)


def test_only_correct_support_bounded_by_diagonal(small_ckpt, small_data, vocab):
    graphs = small_data[0].graphs
    logits = predict_logits(graphs, small_ckpt.params, small_ckpt.model_config)
    table = aggregate_importance(graphs, small_ckpt, vocab)
    everything = aggregate_importance(graphs, small_ckpt, vocab, only_correct=False)
    for c in range(len(table.class_names)):
        diag = sum(1 for g, row in zip(graphs, logits) if g.label == c and row.argmax() == c)
        assert table.images[c] == diag
        assert all(n <= diag for _, _, n in table.ranked(c))
    assert sum(everything.images) == len(graphs)


def test_mean_mode(small_ckpt, small_data, vocab):
    graphs = small_data[0].graphs[:60]
    s = aggregate_importance(graphs, small_ckpt, vocab)
    m = aggregate_importance(graphs, small_ckpt, vocab, mode="mean")
    for c in range(len(s.class_names)):
        if s.images[c]:
            for (l1, a, _), (l2, b, _) in zip(s.ranked(c), m.ranked(c)):
                assert l1 == l2 and abs(a / s.images[c] - b) < 1e-12


def test_render_and_parse(small_ckpt, small_data, vocab):
    table = aggregate_importance(small_data[0].graphs, small_ckpt, vocab)
    text, payload = render_tables(table, 3, 2)
    again, _ = render_tables(table, 3, 2)
    assert text == again
    parsed = parse_rendered_table(text)
    for row in payload:
        objs, rels = parsed[row["class"]]
        assert objs == [o["label"] for o in row["objects"]]
        assert rels == [r["label"] for r in row["relations"]]
        assert len(row["objects"]) == min(3, len(table.ranked(table.class_names.index(row["class"]), "objects")))
    json.dumps(payload)


def test_ranking_ties_and_padding():
    t = ClassImportanceTable(["x", "y"])
    t.objects[0]["b"] = [1.0, 1]
    t.objects[0]["a"] = [1.0, 1]
    t.objects[0]["c"] = [2.0, 1]
    assert [r[0] for r in t.ranked(0)] == ["c", "a", "b"]
    _, payload = render_tables(t, 10, 5)
    assert len(payload[0]["objects"]) == 3 and payload[1]["objects"] == []


def test_unk_obj_reaches_tables(small_ckpt, vocab):
    g = validate_graph(SceneGraph("u", (ObjectNode(0, vocab.unk_obj, (0, 0, 1, 1)), ObjectNode(1, 5, (0, 0, .5, .5))),
                                  label=0))
    table = aggregate_importance([g], small_ckpt, vocab, only_correct=False)
    text, _ = render_tables(table)
    assert "[unk_obj]" in text
