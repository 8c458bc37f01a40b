"""Trainable forward path from input features to retrieval representations.

One shared network serves both domains (the domain tag is metadata only):
a two-layer tanh trunk produces a pair of hidden token vectors (h_word,
h_visual); each goes through its own gated projection head for the
anchor-matching losses, and a self-attention aggregator blends the raw
token pair into the final retrieval vector (a learned dynamic weighted
average, L2-normalized).  Because the aggregation has almost no capacity
of its own, everything the losses teach the tokens shows up directly in
retrieval.  Gradients flowing back into the trunk pass a scale-gradient
node, reproducing a reduced-backbone-learning-rate setup without touching
the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchorgraph import xavier_uniform
from .errors import ContractError
from .tape import Tape, Var

__all__ = [
    "ArchConfig",
    "Representation",
    "init_encoder_params",
    "gated_projection_graph",
    "attention_aggregate_graph",
    "encode_graph",
    "gated_projection",
    "attention_aggregate",
    "encode",
    "encode_batch",
]


@dataclass
class ArchConfig:
    """Shapes of every trainable component."""

    input_dim: int
    word_dim: int = 48
    trunk_hidden: int = 64
    trunk_dim: int = 512     # width of each trunk token (also the final
                             # retrieval dimension, since the aggregator is
                             # a weighted average of the tokens)
    proj_dim: int = 512      # output units of the gated projection heads
    attn_dim: int = 64
    gcn_layers: int = 4


@dataclass
class Representation:
    """Per-sample outputs; all three vectors are unit length."""

    r_word: np.ndarray
    r_visual: np.ndarray
    r_final: np.ndarray
    domain: str


def _init_gated_projection(rng, prefix, in_dim, out_dim, tensors):
    tensors[f"{prefix}.W1"] = xavier_uniform(rng, in_dim, out_dim)
    tensors[f"{prefix}.b1"] = np.zeros((1, out_dim))
    tensors[f"{prefix}.W2"] = xavier_uniform(rng, out_dim, out_dim)
    tensors[f"{prefix}.b2"] = np.zeros((1, out_dim))


def init_encoder_params(rng, arch: ArchConfig) -> dict[str, np.ndarray]:
    """Trunk, both projection heads, and the attention aggregator."""
    t = {}
    t["trunk.W1"] = xavier_uniform(rng, arch.input_dim, arch.trunk_hidden)
    t["trunk.b1"] = np.zeros((1, arch.trunk_hidden))
    t["trunk.W2"] = xavier_uniform(rng, arch.trunk_hidden, 2 * arch.trunk_dim)
    t["trunk.b2"] = np.zeros((1, 2 * arch.trunk_dim))
    _init_gated_projection(rng, "proj_word", arch.trunk_dim, arch.proj_dim, t)
    _init_gated_projection(rng, "proj_visual", arch.trunk_dim, arch.proj_dim, t)
    t["agg.Wa"] = xavier_uniform(rng, arch.trunk_dim, arch.attn_dim)
    t["agg.ba"] = np.zeros((1, arch.attn_dim))
    t["agg.q"] = xavier_uniform(rng, arch.attn_dim, 1)
    return t


def gated_projection_graph(t: Tape, x: Var, p: dict[str, Var], prefix: str) -> Var:
    """y = (x W1 + b1) * sigmoid((x W1 + b1) W2 + b2), rows L2-normalized."""
    pre = t.add(t.matmul(x, p[f"{prefix}.W1"]), p[f"{prefix}.b1"])
    gate = t.sigmoid(t.add(t.matmul(pre, p[f"{prefix}.W2"]), p[f"{prefix}.b2"]))
    return t.row_normalize(t.mul(pre, gate))


def attention_aggregate_graph(
    t: Tape, h_word: Var, h_visual: Var, p: dict[str, Var]
) -> tuple[Var, Var]:
    """Score each token with q . tanh(W h + b), softmax the two scores, and
    L2-normalize the weighted blend; returns (output, weights)."""
    scores = []
    for h in (h_word, h_visual):
        z = t.tanh(t.add(t.matmul(h, p["agg.Wa"]), p["agg.ba"]))
        scores.append(t.matmul(z, p["agg.q"]))
    alpha = t.row_softmax(t.hstack(scores[0], scores[1]))
    blended = t.add(
        t.mul(h_word, t.cols(alpha, 0, 1)),
        t.mul(h_visual, t.cols(alpha, 1, 2)),
    )
    return t.row_normalize(blended), alpha


def _trunk_tokens(
    t: Tape, x: Var, p: dict[str, Var], arch: ArchConfig, backbone_grad_scale: float
) -> tuple[Var, Var]:
    # Unit-norm input rows have per-entry scale ~1/sqrt(dim); rescaling to
    # unit per-entry variance keeps the tanh trunk out of its linear regime.
    x = t.smul(x, np.sqrt(arch.input_dim))
    hidden = t.tanh(t.add(t.matmul(x, p["trunk.W1"]), p["trunk.b1"]))
    tokens = t.add(t.matmul(hidden, p["trunk.W2"]), p["trunk.b2"])
    tokens = t.scale_grad(tokens, backbone_grad_scale)
    return (
        t.cols(tokens, 0, arch.trunk_dim),
        t.cols(tokens, arch.trunk_dim, 2 * arch.trunk_dim),
    )


def encode_graph(
    t: Tape, x: Var, p: dict[str, Var], arch: ArchConfig, backbone_grad_scale: float
) -> tuple[Var, Var, Var]:
    """Full forward path for a batch; returns (r_word, r_visual, r_final)."""
    h_word, h_visual = _trunk_tokens(t, x, p, arch, backbone_grad_scale)
    r_word = gated_projection_graph(t, h_word, p, "proj_word")
    r_visual = gated_projection_graph(t, h_visual, p, "proj_visual")
    r_final, _ = attention_aggregate_graph(t, h_word, h_visual, p)
    return r_word, r_visual, r_final


def encode_retrieval_graph(
    t: Tape, x: Var, p: dict[str, Var], arch: ArchConfig, backbone_grad_scale: float
) -> Var:
    """Retrieval-only forward path (trunk + aggregation, no head work)."""
    h_word, h_visual = _trunk_tokens(t, x, p, arch, backbone_grad_scale)
    r_final, _ = attention_aggregate_graph(t, h_word, h_visual, p)
    return r_final


def _param_vars(t: Tape, tensors: dict[str, np.ndarray], names) -> dict[str, Var]:
    return {name: t.input(name, *tensors[name].shape) for name in names}


_ENCODER_TENSORS = (
    "trunk.W1", "trunk.b1", "trunk.W2", "trunk.b2",
    "proj_word.W1", "proj_word.b1", "proj_word.W2", "proj_word.b2",
    "proj_visual.W1", "proj_visual.b1", "proj_visual.W2", "proj_visual.b2",
    "agg.Wa", "agg.ba", "agg.q",
)

_RETRIEVAL_TENSORS = (
    "trunk.W1", "trunk.b1", "trunk.W2", "trunk.b2",
    "agg.Wa", "agg.ba", "agg.q",
)


def gated_projection(h, tensors: dict[str, np.ndarray], prefix: str = "proj_word"):
    """Value-level gated projection of a single vector (or a batch)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    t = Tape()
    names = [f"{prefix}.{s}" for s in ("W1", "b1", "W2", "b2")]
    p = _param_vars(t, tensors, names)
    x = t.input("x", *h.shape)
    gated_projection_graph(t, x, p, prefix)
    out = t.forward({**{n: tensors[n] for n in names}, "x": h})
    return out[0] if out.shape[0] == 1 else out


def attention_aggregate(h_word, h_visual, tensors: dict[str, np.ndarray]):
    """Value-level aggregation of one token pair; returns (vector, weights)."""
    hw = np.atleast_2d(np.asarray(h_word, dtype=np.float64))
    hv = np.atleast_2d(np.asarray(h_visual, dtype=np.float64))
    names = ["agg.Wa", "agg.ba", "agg.q"]
    t = Tape()
    p = _param_vars(t, tensors, names)
    xw = t.input("h_word", *hw.shape)
    xv = t.input("h_visual", *hv.shape)
    out_var, alpha_var = attention_aggregate_graph(t, xw, xv, p)
    t.rows(out_var, 0, hw.shape[0])
    t.forward({**{n: tensors[n] for n in names}, "h_word": hw, "h_visual": hv})
    out, alpha = t.value(out_var), t.value(alpha_var)
    if hw.shape[0] == 1:
        return out[0], alpha[0]
    return out, alpha


def encode_batch(
    vectors,
    tensors: dict[str, np.ndarray],
    arch: ArchConfig,
    backbone_grad_scale: float = 0.1,
):
    """Encode a feature matrix; returns (r_word, r_visual, r_final) arrays."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[1] != arch.input_dim:
        raise ContractError(
            f"expected input dim {arch.input_dim}, got {x.shape[1]}"
        )
    t = Tape()
    p = _param_vars(t, tensors, _ENCODER_TENSORS)
    xv = t.input("x", *x.shape)
    r_word, r_visual, r_final = encode_graph(t, xv, p, arch, backbone_grad_scale)
    t.rows(r_final, 0, x.shape[0])
    t.forward({**{n: tensors[n] for n in _ENCODER_TENSORS}, "x": x})
    return t.value(r_word), t.value(r_visual), t.value(r_final)


def encode_retrieval_batch(
    vectors,
    tensors: dict[str, np.ndarray],
    arch: ArchConfig,
    backbone_grad_scale: float = 0.1,
):
    """Final retrieval representations only (skips the projection heads)."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[1] != arch.input_dim:
        raise ContractError(f"expected input dim {arch.input_dim}, got {x.shape[1]}")
    t = Tape()
    p = _param_vars(t, tensors, _RETRIEVAL_TENSORS)
    xv = t.input("x", *x.shape)
    encode_retrieval_graph(t, xv, p, arch, backbone_grad_scale)
    return t.forward({**{n: tensors[n] for n in _RETRIEVAL_TENSORS}, "x": x})


def encode(
    x,
    tensors: dict[str, np.ndarray],
    arch: ArchConfig,
    backbone_grad_scale: float = 0.1,
    domain: str = "sketch",
) -> Representation:
    """Encode one feature vector into its three unit-norm representations."""
    r_word, r_visual, r_final = encode_batch(x, tensors, arch, backbone_grad_scale)
    return Representation(r_word[0], r_visual[0], r_final[0], domain)
