"""Edge-featured GATv2 graph classifier with attention pooling.

Pipeline per graph: node features are a learned object-label embedding
concatenated with the normalized box; edge features are a learned
predicate embedding. ``num_layers`` GATv2 layers (ELU between layers)
feed a softmax-gated attention pool and a two-layer MLP head.

Batches are disjoint unions of graphs. Gradients are computed by explicit
reverse passes over the cached forward intermediates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError
from .graph import SceneGraph, Vocabulary
from .numerics import ParameterStore, cross_entropy_with_logits, make_rng, segment_softmax, segment_sum
from .numerics.ops import (
    check_finite,
    elu,
    elu_backward,
    leaky_relu,
    leaky_relu_backward,
    segment_softmax_backward,
)


@dataclass(frozen=True)
class ModelConfig:
    num_object_labels: int
    num_relation_labels: int
    num_classes: int
    object_embed_dim: int = 124
    relation_embed_dim: int = 32
    hidden_dim: int = 364
    num_heads: int = 4
    num_layers: int = 2
    dropout: float = 0.2
    mlp_hidden_dim: int | None = None
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.mlp_hidden_dim is None:
            object.__setattr__(self, "mlp_hidden_dim", self.hidden_dim)
        dims = (
            self.num_object_labels,
            self.num_relation_labels,
            self.object_embed_dim,
            self.relation_embed_dim,
            self.hidden_dim,
            self.num_heads,
            self.num_layers,
            self.mlp_hidden_dim,
        )
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def node_feature_dim(self) -> int:
        return self.object_embed_dim + 4

    @property
    def self_loop_index(self) -> int:
        # Vocabulary appends [unk_rel] then [self_loop] to the relation table.
        return self.num_relation_labels - 1

    @classmethod
    def places8(cls, vocab: Vocabulary, num_classes: int = 8, **overrides) -> "ModelConfig":
        return cls(vocab.num_objects, vocab.num_relations, num_classes, **overrides)

    @classmethod
    def rcpd(cls, vocab: Vocabulary, num_classes: int = 2, **overrides) -> "ModelConfig":
        kw = dict(hidden_dim=128, num_heads=8)
        kw.update(overrides)
        return cls(vocab.num_objects, vocab.num_relations, num_classes, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Fresh parameters; the name set and draw order depend only on ``config``."""
    rng = make_rng(seed, "init")
    c = config
    p = ParameterStore()
    p.add("embed.object", rng.uniform(-0.05, 0.05, (c.num_object_labels, c.object_embed_dim)))
    p.add("embed.relation", rng.uniform(-0.05, 0.05, (c.num_relation_labels, c.relation_embed_dim)))
    d_in = c.node_feature_dim
    dh = c.head_dim
    for layer in range(c.num_layers):
        for k in range(c.num_heads):
            pre = f"gat.{layer}.head.{k}."
            p.add(pre + "w_src", _glorot(rng, d_in, dh, (d_in, dh)))
            p.add(pre + "w_dst", _glorot(rng, d_in, dh, (d_in, dh)))
            p.add(pre + "w_edge", _glorot(rng, c.relation_embed_dim, dh, (c.relation_embed_dim, dh)))
            p.add(pre + "att", _glorot(rng, dh, 1, (dh,)))
        d_in = c.hidden_dim
    p.add("pool.gate", _glorot(rng, c.hidden_dim, 1, (c.hidden_dim,)))
    p.add("pool.bias", np.zeros(1))
    add_head_parameters(p, c, rng)
    return p


def add_head_parameters(p: ParameterStore, c: ModelConfig, rng, only_output: bool = False) -> None:
    if not only_output:
        p.add("head.mlp.0.weight", _glorot(rng, c.hidden_dim, c.mlp_hidden_dim, (c.hidden_dim, c.mlp_hidden_dim)))
        p.add("head.mlp.0.bias", np.zeros(c.mlp_hidden_dim))
    p.add("head.mlp.1.weight", _glorot(rng, c.mlp_hidden_dim, c.num_classes, (c.mlp_hidden_dim, c.num_classes)))
    p.add("head.mlp.1.bias", np.zeros(c.num_classes))


# ---------------------------------------------------------------- graph tensors


@dataclass
class GraphBatch:
    """Disjoint union of graphs as flat index arrays.

    Message edges per graph are its relation edges in input order followed
    by one self-loop per node; each graph's nodes and edges are contiguous.
    """

    labels: np.ndarray  # (N,) object label index
    bbox: np.ndarray  # (N, 4)
    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    rel: np.ndarray  # (E,)
    is_self_loop: np.ndarray  # (E,) bool
    node_graph: np.ndarray  # (N,) graph index
    node_offsets: np.ndarray  # (G+1,)
    edge_offsets: np.ndarray  # (G+1,)
    targets: np.ndarray | None = None  # (G,)
    graph_ids: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @property
    def num_graphs(self) -> int:
        return len(self.node_offsets) - 1


def build_message_graph(g: SceneGraph, self_loop_index: int):
    """(src, dst, rel, is_self_loop) arrays: relation edges, then self-loops by node id."""
    n = g.num_nodes
    m = g.num_edges
    src = np.empty(m + n, dtype=np.intp)
    dst = np.empty(m + n, dtype=np.intp)
    rel = np.empty(m + n, dtype=np.intp)
    for i, e in enumerate(g.edges):
        src[i] = e.subject_id
        dst[i] = e.object_id
        rel[i] = e.predicate_index
    src[m:] = dst[m:] = np.arange(n)
    rel[m:] = self_loop_index
    is_self = np.zeros(m + n, dtype=bool)
    is_self[m:] = True
    return src, dst, rel, is_self


class GraphEncoder:
    """Caches per-graph index arrays so repeated batching is cheap."""

    def __init__(self, self_loop_index: int):
        self.self_loop_index = self_loop_index
        self._cache: dict[int, tuple] = {}

    def encode(self, g: SceneGraph):
        key = id(g)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is g:
            return hit[1]
        labels = np.array([n.label_index for n in g.nodes], dtype=np.intp)
        bbox = np.array([n.bbox for n in g.nodes], dtype=np.float64).reshape(-1, 4)
        arrays = (labels, bbox) + build_message_graph(g, self.self_loop_index)
        self._cache[key] = (g, arrays)
        return arrays

    def collate(self, graphs: Sequence[SceneGraph], with_targets: bool = False) -> GraphBatch:
        parts = [self.encode(g) for g in graphs]
        n_counts = np.array([len(p[0]) for p in parts], dtype=np.intp)
        e_counts = np.array([len(p[2]) for p in parts], dtype=np.intp)
        node_offsets = np.concatenate([[0], np.cumsum(n_counts)]).astype(np.intp)
        edge_offsets = np.concatenate([[0], np.cumsum(e_counts)]).astype(np.intp)
        shift = np.repeat(node_offsets[:-1], e_counts)
        targets = None
        if with_targets:
            if any(g.label is None for g in graphs):
                bad = [g.graph_id for g in graphs if g.label is None]
                raise DataError(f"unlabeled graph(s) in training batch: {bad[:5]}")
            targets = np.array([g.label for g in graphs], dtype=np.intp)
        return GraphBatch(
            labels=np.concatenate([p[0] for p in parts]),
            bbox=np.concatenate([p[1] for p in parts]),
            src=np.concatenate([p[2] for p in parts]) + shift,
            dst=np.concatenate([p[3] for p in parts]) + shift,
            rel=np.concatenate([p[4] for p in parts]),
            is_self_loop=np.concatenate([p[5] for p in parts]),
            node_graph=np.repeat(np.arange(len(parts)), n_counts),
            node_offsets=node_offsets,
            edge_offsets=edge_offsets,
            targets=targets,
            graph_ids=[g.graph_id for g in graphs],
        )


# ---------------------------------------------------------------- attention record


@dataclass
class AttentionRecord:
    """Attention of one forward pass over one graph.

    ``attention[l]`` is an (E, num_heads) array of pre-dropout coefficients
    for layer ``l`` aligned with ``src``/``dst``/``rel``/``is_self_loop``.
    """

    graph_id: str
    attention: list
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    is_self_loop: np.ndarray
    pooling: np.ndarray
    logits: np.ndarray
    predicted: int

    @property
    def num_nodes(self) -> int:
        return len(self.pooling)


def split_records(batch: GraphBatch, attention: list, pooling: np.ndarray, logits: np.ndarray) -> list[AttentionRecord]:
    out = []
    for gi in range(batch.num_graphs):
        n0, n1 = batch.node_offsets[gi], batch.node_offsets[gi + 1]
        e0, e1 = batch.edge_offsets[gi], batch.edge_offsets[gi + 1]
        out.append(
            AttentionRecord(
                graph_id=batch.graph_ids[gi] if batch.graph_ids else str(gi),
                attention=[a[e0:e1].copy() for a in attention],
                src=batch.src[e0:e1] - n0,
                dst=batch.dst[e0:e1] - n0,
                rel=batch.rel[e0:e1].copy(),
                is_self_loop=batch.is_self_loop[e0:e1].copy(),
                pooling=pooling[n0:n1].copy(),
                logits=logits[gi].copy(),
                predicted=int(np.argmax(logits[gi])),
            )
        )
    return out


# ---------------------------------------------------------------- layers


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _stack_heads(params, layer, num_heads, key):
    return np.concatenate([params[f"gat.{layer}.head.{k}.{key}"] for k in range(num_heads)], axis=-1)


def assemble_node_features(batch: GraphBatch, params: ParameterStore) -> np.ndarray:
    """Rows are ``embedding[label] || bbox``."""
    return np.concatenate([params["embed.object"][batch.labels], batch.bbox], axis=1)


def gatv2_layer(x, src, dst, edge_feat, w_src, w_dst, w_edge, att, num_nodes, slope=0.2, att_mask=None):
    """One multi-head GATv2 layer with additive edge features.

    Shapes: ``x`` (N, D), ``edge_feat`` (E, R), ``w_src``/``w_dst``
    (D, H*dh), ``w_edge`` (R, H*dh), ``att`` (H, dh). Returns the
    concatenated head outputs (N, H*dh), the (E, H) attention and a cache
    for :func:`gatv2_layer_backward`.
    """
    num_heads, dh = att.shape
    num_edges = len(src)
    xs = x @ w_src
    xd = x @ w_dst
    fe = edge_feat @ w_edge
    z = xs[src] + xd[dst] + fe
    lz = leaky_relu(z, slope)
    scores = np.einsum("ehd,hd->eh", lz.reshape(num_edges, num_heads, dh), att)
    alpha = segment_softmax(scores, dst, num_nodes)
    alpha_used = alpha if att_mask is None else alpha * att_mask
    msg = xd[src] + fe
    weighted = (alpha_used[:, :, None] * msg.reshape(num_edges, num_heads, dh)).reshape(num_edges, -1)
    out = segment_sum(weighted, dst, num_nodes)
    cache = (x, src, dst, edge_feat, w_src, w_dst, w_edge, att, z, lz, alpha, alpha_used, att_mask, msg, slope)
    return check_finite(out, "GATv2 layer output"), alpha, cache


def gatv2_layer_backward(dout, cache):
    """Gradients ``(dx, dedge_feat, dw_src, dw_dst, dw_edge, datt)``."""
    x, src, dst, edge_feat, w_src, w_dst, w_edge, att, z, lz, alpha, alpha_used, att_mask, msg, slope = cache
    num_heads, dh = att.shape
    num_edges = len(src)
    num_nodes = x.shape[0]
    dweighted = dout[dst].reshape(num_edges, num_heads, dh)
    msg3 = msg.reshape(num_edges, num_heads, dh)
    dalpha_used = np.einsum("ehd,ehd->eh", dweighted, msg3)
    dmsg = (alpha_used[:, :, None] * dweighted).reshape(num_edges, -1)
    dalpha = dalpha_used if att_mask is None else dalpha_used * att_mask
    dscores = segment_softmax_backward(dalpha, alpha, dst, num_nodes)
    datt = np.einsum("eh,ehd->hd", dscores, lz.reshape(num_edges, num_heads, dh))
    dlz = (dscores[:, :, None] * att[None, :, :]).reshape(num_edges, -1)
    dz = leaky_relu_backward(dlz, z, slope)
    dxs = segment_sum(dz, src, num_nodes)
    dxd = segment_sum(dz, dst, num_nodes) + segment_sum(dmsg, src, num_nodes)
    dfe = dz + dmsg
    dw_src = x.T @ dxs
    dw_dst = x.T @ dxd
    dw_edge = edge_feat.T @ dfe
    dx = dxs @ w_src.T + dxd @ w_dst.T
    dedge = dfe @ w_edge.T
    return dx, dedge, dw_src, dw_dst, dw_edge, datt


def attention_pool(x, gate, bias, node_graph, num_graphs):
    """Softmax-gated sum of node rows per graph; returns (pooled, weights, cache)."""
    t = np.tanh(x)
    scores = t @ gate + bias[0]
    w = segment_softmax(scores, node_graph, num_graphs)
    pooled = segment_sum(w[:, None] * x, node_graph, num_graphs)
    return pooled, w, (x, t, gate, w, node_graph, num_graphs)


def attention_pool_backward(dpooled, cache):
    x, t, gate, w, node_graph, num_graphs = cache
    dp = dpooled[node_graph]
    dx = w[:, None] * dp
    dw = np.einsum("nd,nd->n", dp, x)
    dscores = segment_softmax_backward(dw, w, node_graph, num_graphs)
    dbias = np.array([dscores.sum()])
    dgate = t.T @ dscores
    dx += (dscores[:, None] * gate[None, :]) * (1.0 - t * t)
    return dx, dgate, dbias


# ---------------------------------------------------------------- full model


class ForwardPass:
    """Forward over a batch; holds everything the backward pass needs."""

    def __init__(self, batch: GraphBatch, params: ParameterStore, config: ModelConfig, train: bool = False, rng=None):
        c = config
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")
        self.batch, self.params, self.config = batch, params, c
        rate = c.dropout if train else 0.0
        n = batch.num_nodes
        e = len(batch.src)
        self.edge_feat = params["embed.relation"][batch.rel]
        x = assemble_node_features(batch, params)
        self.layers = []
        self.attention = []
        for layer in range(c.num_layers):
            in_mask = _dropout_mask(rng, x.shape, rate) if rate else None
            att_mask = _dropout_mask(rng, (e, c.num_heads), rate) if rate else None
            x_in = x * in_mask if in_mask is not None else x
            w_src = _stack_heads(params, layer, c.num_heads, "w_src")
            w_dst = _stack_heads(params, layer, c.num_heads, "w_dst")
            w_edge = _stack_heads(params, layer, c.num_heads, "w_edge")
            att = np.stack([params[f"gat.{layer}.head.{k}.att"] for k in range(c.num_heads)])
            h, alpha, cache = gatv2_layer(
                x_in, batch.src, batch.dst, self.edge_feat, w_src, w_dst, w_edge, att, n,
                slope=c.leaky_slope, att_mask=att_mask,
            )
            last = layer == c.num_layers - 1
            self.layers.append((in_mask, cache, h, last))
            self.attention.append(alpha)
            x = h if last else elu(h)
        self.node_repr = x
        pooled, self.pool_weights, self.pool_cache = attention_pool(
            x, params["pool.gate"], params["pool.bias"], batch.node_graph, batch.num_graphs
        )
        self.pooled = pooled
        a = pooled @ params["head.mlp.0.weight"] + params["head.mlp.0.bias"]
        r = np.maximum(a, 0.0)
        self.mlp_mask = _dropout_mask(rng, r.shape, rate) if rate else None
        rd = r * self.mlp_mask if self.mlp_mask is not None else r
        self.mlp_cache = (a, rd)
        self.logits = check_finite(rd @ params["head.mlp.1.weight"] + params["head.mlp.1.bias"], "logits")

    def records(self) -> list[AttentionRecord]:
        return split_records(self.batch, self.attention, self.pool_weights, self.logits)

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients into the store's grad buffers."""
        p, c, batch = self.params, self.config, self.batch
        a, rd = self.mlp_cache
        p.grad("head.mlp.1.weight")[...] += rd.T @ dlogits
        p.grad("head.mlp.1.bias")[...] += dlogits.sum(axis=0)
        drd = dlogits @ p["head.mlp.1.weight"].T
        dr = drd * self.mlp_mask if self.mlp_mask is not None else drd
        da = dr * (a > 0)
        p.grad("head.mlp.0.weight")[...] += self.pooled.T @ da
        p.grad("head.mlp.0.bias")[...] += da.sum(axis=0)
        dpooled = da @ p["head.mlp.0.weight"].T
        dx, dgate, dbias = attention_pool_backward(dpooled, self.pool_cache)
        p.grad("pool.gate")[...] += dgate
        p.grad("pool.bias")[...] += dbias

        dedge_total = np.zeros_like(self.edge_feat)
        dh_ = c.head_dim
        for layer in reversed(range(c.num_layers)):
            in_mask, cache, h, last = self.layers[layer]
            dh = dx if last else elu_backward(dx, h)
            dx_in, dedge, dw_src, dw_dst, dw_edge, datt = gatv2_layer_backward(dh, cache)
            dedge_total += dedge
            for k in range(c.num_heads):
                cols = slice(k * dh_, (k + 1) * dh_)
                pre = f"gat.{layer}.head.{k}."
                p.grad(pre + "w_src")[...] += dw_src[:, cols]
                p.grad(pre + "w_dst")[...] += dw_dst[:, cols]
                p.grad(pre + "w_edge")[...] += dw_edge[:, cols]
                p.grad(pre + "att")[...] += datt[k]
            dx = dx_in * in_mask if in_mask is not None else dx_in
        d_emb = dx[:, : c.object_embed_dim]
        p.grad("embed.object")[...] += segment_sum(d_emb, batch.labels, c.num_object_labels)
        p.grad("embed.relation")[...] += segment_sum(dedge_total, batch.rel, c.num_relation_labels)


def forward(graph_or_batch, params: ParameterStore, config: ModelConfig, mode: str = "eval", rng=None, encoder=None):
    """Logits and attention records for one graph or a list of graphs.

    A single :class:`SceneGraph` returns ``(logits (1, C), AttentionRecord)``;
    a sequence returns ``(logits (G, C), [AttentionRecord, ...])``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    enc = encoder or GraphEncoder(config.self_loop_index)
    single = isinstance(graph_or_batch, SceneGraph)
    graphs = [graph_or_batch] if single else list(graph_or_batch)
    fp = ForwardPass(enc.collate(graphs), params, config, train=mode == "train", rng=rng)
    recs = fp.records()
    return (fp.logits, recs[0]) if single else (fp.logits, recs)


def batch_loss(batch, params: ParameterStore, config: ModelConfig, encoder=None, class_weights=None):
    """Eval-mode mean cross-entropy without a backward pass (keeps the params' dtype)."""
    if not isinstance(batch, GraphBatch):
        enc = encoder or GraphEncoder(config.self_loop_index)
        batch = enc.collate(batch, with_targets=True)
    fp = ForwardPass(batch, params, config, train=False)
    return cross_entropy_with_logits(fp.logits, batch.targets, class_weights)[0]


def loss_and_gradients(batch, params: ParameterStore, config: ModelConfig, rng=None, train: bool = True,
                       class_weights=None, encoder=None) -> float:
    """Mean cross-entropy over ``batch``; gradients land in ``params``.

    ``batch`` is a list of labeled graphs or a pre-collated
    :class:`GraphBatch`. Gradient buffers are zeroed first.
    """
    if not isinstance(batch, GraphBatch):
        enc = encoder or GraphEncoder(config.self_loop_index)
        batch = enc.collate(batch, with_targets=True)
    if batch.targets is None:
        raise DataError("batch has no targets")
    fp = ForwardPass(batch, params, config, train=train, rng=rng)
    loss, dlogits = cross_entropy_with_logits(fp.logits, batch.targets, class_weights)
    params.zero_grad()
    fp.backward(dlogits)
    return loss
