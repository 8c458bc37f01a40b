"""Unified two-modality anchor graph and the graph-convolution stack.

The graph joins C word-anchor nodes with C visual-anchor nodes (both
already projected to a common dimension).  Edge logits are the cosine
similarities within each modality; between modalities only same-class
pairs are connected, carrying the self-connection weight 1.  Every other
cross pair gets a large negative logit so row-softmax assigns it zero
weight.  The convolution stack is adjacency @ nodes @ W per layer with
ReLU between layers, none after the last; outputs are row-normalized and
split back into the two modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateAnchorError
from .tape import Tape, Var

__all__ = [
    "UnifiedGraph",
    "GcnParams",
    "init_gcn_params",
    "build_unified_graph",
    "gcn_forward",
    "unified_graph_graph",
    "gcn_graph",
    "adapted_anchors_graph",
]

# Excluded cross-modal edges: finite but far below any cosine logit, so the
# row softmax underflows their weight to exactly zero.
EXCLUDED_LOGIT = -1e30


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class UnifiedGraph:
    nodes: np.ndarray       # (2C, D): word rows then visual rows
    adjacency: np.ndarray   # (2C, 2C), rows sum to 1

    @property
    def num_classes(self):
        return self.nodes.shape[0] // 2


@dataclass
class GcnParams:
    layer_weights: list[np.ndarray]  # each (D, D)

    @property
    def num_layers(self):
        return len(self.layer_weights)


def init_gcn_params(rng, dim: int, layers: int = 4) -> GcnParams:
    if layers < 1:
        raise ContractError("need at least one graph-conv layer")
    return GcnParams([xavier_uniform(rng, dim, dim) for _ in range(layers)])


def _cross_block(c: int) -> np.ndarray:
    block = np.full((c, c), EXCLUDED_LOGIT)
    np.fill_diagonal(block, 1.0)
    return block


def unified_graph_graph(t: Tape, word: Var, visual: Var) -> tuple[Var, Var]:
    """Record graph construction on a tape; returns (nodes, adjacency) vars."""
    (cw, dw), (cv, dv) = word.shape, visual.shape
    if (cw, dw) != (cv, dv):
        raise ContractError(
            f"word and visual anchors must share shape, got {(cw, dw)} vs {(cv, dv)}"
        )
    nw = t.row_normalize(word)
    nv = t.row_normalize(visual)
    sim_w = t.matmul(nw, t.transpose(nw))
    sim_v = t.matmul(nv, t.transpose(nv))
    cross = t.constant(_cross_block(cw))
    logits = t.vstack(t.hstack(sim_w, cross), t.hstack(cross, sim_v))
    adjacency = t.row_softmax(logits)
    nodes = t.vstack(word, visual)
    return nodes, adjacency


def gcn_graph(t: Tape, nodes: Var, adjacency: Var, weights: list[Var]) -> Var:
    """Stacked graph convolutions; ReLU between layers, none after the last."""
    h = nodes
    for i, w in enumerate(weights):
        h = t.matmul(t.matmul(adjacency, h), w)
        if i + 1 < len(weights):
            h = t.relu(h)
    return h


def adapted_anchors_graph(
    t: Tape, word: Var, visual: Var, weights: list[Var]
) -> tuple[Var, Var]:
    """Full anchor-adaptation subgraph: build the unified graph, run the
    convolution stack, normalize, and split modalities back apart."""
    c = word.shape[0]
    nodes, adjacency = unified_graph_graph(t, word, visual)
    h = gcn_graph(t, nodes, adjacency, weights)
    hn = t.row_normalize(h)
    return t.rows(hn, 0, c), t.rows(hn, c, 2 * c)


def build_unified_graph(word_anchors, visual_anchors) -> UnifiedGraph:
    """Value-level graph construction (runs the same tape subgraph)."""
    word = np.atleast_2d(np.asarray(word_anchors, dtype=np.float64))
    visual = np.atleast_2d(np.asarray(visual_anchors, dtype=np.float64))
    if word.shape != visual.shape:
        raise ContractError(
            f"word and visual anchors must share shape, got {word.shape} vs {visual.shape}"
        )
    for name, m in (("word", word), ("visual", visual)):
        zero = np.flatnonzero(np.linalg.norm(m, axis=1) == 0.0)
        if zero.size:
            raise DegenerateAnchorError(f"zero {name} anchor row(s) at {zero.tolist()}")
    t = Tape()
    wv = t.input("word", *word.shape)
    vv = t.input("visual", *visual.shape)
    nodes, adjacency = unified_graph_graph(t, wv, vv)
    t.forward({"word": word, "visual": visual})
    return UnifiedGraph(nodes=t.value(nodes), adjacency=t.value(adjacency))


def gcn_forward(graph: UnifiedGraph, params: GcnParams):
    """Adapted (word, visual) anchors for a prebuilt unified graph.

    Output rows are L2-normalized; a row that collapses to zero before
    normalization raises DegenerateAnchorError.
    """
    c = graph.num_classes
    t = Tape()
    nodes = t.constant(graph.nodes)
    adjacency = t.constant(graph.adjacency)
    weights = [t.constant(w) for w in params.layer_weights]
    h = gcn_graph(t, nodes, adjacency, weights)
    hn = t.row_normalize(h)
    t.rows(hn, 0, 2 * c)  # keeps the full matrix as the final node
    t.forward({})
    raw = t.value(h)
    zero = np.flatnonzero(np.linalg.norm(raw, axis=1) == 0.0)
    if zero.size:
        raise DegenerateAnchorError(
            f"graph convolution collapsed row(s) {zero.tolist()} to zero"
        )
    adapted = t.value(hn)
    return adapted[:c], adapted[c:]
