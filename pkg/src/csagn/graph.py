"""Speaker- and predicate-typed utterance graph with two-step relational
graph convolution."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Conversation
from .tensor import Tensor

ABLATIONS = ("no_speaker_dep", "no_predicate_dep")


@dataclass(frozen=True)
class RelationId:
    from_speaker: int
    to_speaker: int
    pred_flag: bool

    def encode(self, num_speakers: int) -> int:
        return (self.from_speaker * num_speakers + self.to_speaker) * 2 + int(self.pred_flag)

    @classmethod
    def decode(cls, rel: int, num_speakers: int) -> "RelationId":
        if not 0 <= rel < num_relations(num_speakers):
            raise ValueError(f"relation id {rel} outside [0, {num_relations(num_speakers)})")
        pair, flag = divmod(rel, 2)
        src, dst = divmod(pair, num_speakers)
        return cls(src, dst, bool(flag))


def num_relations(num_speakers: int) -> int:
    return 2 * num_speakers * num_speakers


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: RelationId


@dataclass(frozen=True)
class ConvGraph:
    """Directed graph over utterances; edge (src -> dst) has src <= dst."""

    speakers: tuple[int, ...]
    num_speakers: int
    predicate_utt: int
    window: int | None
    edges: tuple[Edge, ...]

    @property
    def num_vertices(self) -> int:
        return len(self.speakers)

    def relation_ids(self, num_speakers: int | None = None) -> list[int]:
        m = num_speakers or self.num_speakers
        return [e.relation.encode(m) for e in self.edges]

    def in_neighbors(self, i: int, include_self: bool = True) -> list[int]:
        return [e.src for e in self.edges if e.dst == i and (include_self or e.src != i)]

    def arrays(self, num_speakers: int | None = None, size: int | None = None) -> "GraphArrays":
        return GraphArrays.from_graphs([self], num_speakers or self.num_speakers, size)


def build_graph(conv: Conversation, predicate_utt: int, window: int | None = 4) -> ConvGraph:
    """Link each utterance to itself and its ``window`` most recent
    predecessors (all of them when ``window`` is None)."""
    k = len(conv)
    if k < 1:
        raise ValueError("graph needs at least one utterance")
    if not 0 <= predicate_utt < k:
        raise ValueError(f"predicate_utt={predicate_utt} outside [0, {k})")
    spk = conv.speakers
    edges = []
    for i in range(k):
        lo = 0 if window is None else max(0, i - window)
        for j in list(range(lo, i)) + [i]:
            flag = j == predicate_utt or i == predicate_utt
            edges.append(Edge(j, i, RelationId(spk[j], spk[i], flag)))
    return ConvGraph(tuple(spk), conv.num_speakers, predicate_utt, window, tuple(edges))


def ablate(graph: ConvGraph, mode: str | Sequence[str]) -> ConvGraph:
    """Collapse the speaker factors and/or the predicate flag of every relation."""
    modes = (mode,) if isinstance(mode, str) else tuple(mode)
    for m in modes:
        if m not in ABLATIONS:
            raise ValueError(f"unknown graph ablation {m!r}; expected one of {ABLATIONS}")
    edges = []
    for e in graph.edges:
        rel = e.relation
        if "no_speaker_dep" in modes:
            rel = replace(rel, from_speaker=0, to_speaker=0)
        if "no_predicate_dep" in modes:
            rel = replace(rel, pred_flag=False)
        edges.append(replace(e, relation=rel))
    return replace(graph, edges=tuple(edges))


@dataclass(frozen=True)
class GraphArrays:
    """Dense adjacency views of one graph, or of several padded to a common size.

    ``incoming`` marks every edge including self-loops; ``neighbors`` drops
    the self-loops; ``rel_mask[r]`` keeps the non-self edges of relation r and
    ``rel_norm[r]`` holds 1/|N_i^r| on them.
    """

    incoming: np.ndarray
    neighbors: np.ndarray
    rel_mask: np.ndarray
    rel_norm: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[ConvGraph], num_speakers: int, size: int | None = None) -> "GraphArrays":
        size = size or max(g.num_vertices for g in graphs)
        r = num_relations(num_speakers)
        b = len(graphs)
        incoming = np.zeros((b, size, size), dtype=bool)
        rel_mask = np.zeros((b, r, size, size), dtype=bool)
        for n, g in enumerate(graphs):
            if g.num_speakers > num_speakers:
                raise ValueError(f"graph has {g.num_speakers} speakers, model supports {num_speakers}")
            for e, rel in zip(g.edges, g.relation_ids(num_speakers)):
                incoming[n, e.dst, e.src] = True
                if e.src != e.dst:
                    rel_mask[n, rel, e.dst, e.src] = True
        # padded vertices keep a self-loop so their softmax rows stay defined
        idx = np.arange(size)
        incoming[:, idx, idx] = True
        neighbors = incoming.copy()
        neighbors[:, idx, idx] = False
        counts = rel_mask.sum(axis=-1, keepdims=True)
        rel_norm = np.where(rel_mask, 1.0 / np.maximum(counts, 1), 0.0)
        if len(graphs) == 1 and size == graphs[0].num_vertices:
            return cls(incoming[0], neighbors[0], rel_mask[0], rel_norm[0])
        return cls(incoming, neighbors, rel_mask, rel_norm)


@dataclass
class GraphParams:
    w_edge: Tensor
    w_rel: Tensor
    w_self1: Tensor
    w_nbr2: Tensor
    w_self2: Tensor
    log_norm: Tensor | None = None
    num_speakers: int = 2


def init_graph(
    rng: np.random.Generator, d_graph: int = 100, num_speakers: int = 2, learnable_norm: bool = False
) -> GraphParams:
    r = num_relations(num_speakers)
    s = 1.0 / math.sqrt(d_graph)

    def mat(*shape):
        return Tensor(rng.normal(0.0, s, shape), requires_grad=True)

    return GraphParams(
        w_edge=mat(d_graph, d_graph),
        w_rel=mat(r, d_graph, d_graph),
        w_self1=mat(d_graph, d_graph),
        w_nbr2=mat(d_graph, d_graph),
        w_self2=mat(d_graph, d_graph),
        log_norm=Tensor(np.zeros(r), requires_grad=True) if learnable_norm else None,
        num_speakers=num_speakers,
    )


def _arrays(graph, num_speakers: int) -> GraphArrays:
    return graph if isinstance(graph, GraphArrays) else graph.arrays(num_speakers)


def edge_weights(g: Tensor, graph, w_edge: Tensor, num_speakers: int | None = None) -> Tensor:
    """Attention weights alpha[..., i, j] over the in-neighbours j of vertex i.

    Scores are ``g_i^T W_e g_j``; each row is a softmax restricted to the
    incoming edges, self-loop included.
    """
    arrays = _arrays(graph, num_speakers or getattr(graph, "num_speakers", 1))
    scores = (g @ w_edge) @ T.swap_last(g)
    return T.softmax(scores, axis=-1, mask=arrays.incoming)


def _per_relation(g: Tensor, w_rel: Tensor) -> Tensor:
    """Stack ``g @ W_r`` for every relation r on a new axis before the vertex axis."""
    r, d_in, d_out = w_rel.shape
    wide = T.reshape(T.transpose(w_rel, (1, 0, 2)), (d_in, r * d_out))
    msgs = T.reshape(g @ wide, g.shape[:-1] + (r, d_out))
    axes = list(range(msgs.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(msgs, axes)


def rgcn_layer1(g: Tensor, graph, alpha: Tensor, params: GraphParams) -> Tensor:
    """Relation-typed aggregation weighted by alpha / c_{i,r}, plus the
    alpha_ii-weighted self term, then ReLU."""
    arrays = _arrays(graph, params.num_speakers)
    if params.log_norm is None:
        coeff = T.mul(T.reshape(alpha, alpha.shape[:-2] + (1,) + alpha.shape[-2:]), arrays.rel_norm)
    else:
        inv_c = T.reshape(T.exp(-params.log_norm), (-1, 1, 1))
        coeff = T.mul(T.reshape(alpha, alpha.shape[:-2] + (1,) + alpha.shape[-2:]), inv_c * arrays.rel_mask)
    g_by_rel = _per_relation(g, params.w_rel)
    relational = T.sum_(coeff @ g_by_rel, axis=-3)
    eye = np.eye(alpha.shape[-1])
    self_alpha = T.sum_(alpha * eye, axis=-1, keepdims=True)
    return T.relu(relational + self_alpha * (g @ params.w_self1))


def rgcn_layer2(h1: Tensor, graph, params: GraphParams) -> Tensor:
    """Relation-agnostic sum over in-neighbours plus self term, then ReLU."""
    arrays = _arrays(graph, params.num_speakers)
    nbr = arrays.neighbors.astype(float)
    return T.relu((Tensor(nbr) @ h1) @ params.w_nbr2 + h1 @ params.w_self2)


def residual_update(g: Tensor, h2: Tensor) -> Tensor:
    if g.shape != h2.shape:
        raise T.ShapeError(f"residual_update: shapes {g.shape} and {h2.shape} differ")
    return g + h2


def propagate(g: Tensor, graph, params: GraphParams) -> tuple[Tensor, Tensor]:
    """Edge weights, both convolution steps and the residual; returns (h, alpha)."""
    arrays = _arrays(graph, params.num_speakers)
    alpha = edge_weights(g, arrays, params.w_edge)
    h1 = rgcn_layer1(g, arrays, alpha, params)
    h2 = rgcn_layer2(h1, arrays, params)
    return residual_update(g, h2), alpha


def dump_graph(graph: ConvGraph, alpha: np.ndarray | None = None) -> dict:
    """JSON-ready view of vertices, typed edges and (optionally) their weights."""
    edges = []
    for e, rel in zip(graph.edges, graph.relation_ids()):
        entry = {
            "from": e.src,
            "to": e.dst,
            "relation": {
                "from_spk": e.relation.from_speaker,
                "to_spk": e.relation.to_speaker,
                "pred": e.relation.pred_flag,
            },
            "relation_id": rel,
        }
        if alpha is not None:
            entry["alpha"] = float(alpha[e.dst, e.src])
        edges.append(entry)
    return {
        "vertices": [{"index": i, "speaker": s} for i, s in enumerate(graph.speakers)],
        "num_speakers": graph.num_speakers,
        "predicate_utt": graph.predicate_utt,
        "window": graph.window,
        "edges": edges,
    }
