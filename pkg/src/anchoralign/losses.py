"""Training objectives.

Seven terms share one scalar budget with equal weights:

* base: paired-batch contrastive loss on the final representations, with
  image-side negatives only.
* four anchor-matching terms: cross-entropy between the softmax of a
  representation's similarities to every class anchor and the softmax of
  the matching anchor's similarity row (word/visual anchors, each applied
  to the sketch and the image side).
* two sample-matching terms: cross-entropy between in-batch sketch-image
  similarity rows and the batch-indexed anchor-similarity rows (word-head
  and visual-head representations).

Targets never carry a temperature and are detached from the gradient;
prediction logits are divided by ``tau``.  All inputs are expected to be
unit-norm rows, so dot products are cosines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tape import Tape, Var

__all__ = [
    "TERM_NAMES",
    "Batch",
    "LossConfig",
    "BatchOutputs",
    "AdaptedAnchors",
    "info_nce",
    "anchored_semantic_loss",
    "anchored_sample_loss",
    "total_loss",
    "info_nce_graph",
    "anchored_semantic_graph",
    "anchored_sample_graph",
    "one_hot",
]

TERM_NAMES = (
    "base",
    "sem_word_sketch",
    "sem_word_image",
    "sem_visual_sketch",
    "sem_visual_image",
    "sample_word",
    "sample_visual",
)


@dataclass
class Batch:
    """Class-paired features: row i holds a sketch and an image of class
    ``class_ids[i]`` (indices into the anchor rows of the seen classes)."""

    sketches: np.ndarray
    images: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.sketches = np.atleast_2d(np.asarray(self.sketches, dtype=np.float64))
        self.images = np.atleast_2d(np.asarray(self.images, dtype=np.float64))
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        n = len(self.class_ids)
        if len(self.sketches) != n or len(self.images) != n:
            raise ContractError("sketches, images and class_ids must share length")

    def __len__(self):
        return len(self.class_ids)


@dataclass
class LossConfig:
    tau: float = 0.1
    enabled: dict[str, bool] = field(
        default_factory=lambda: {name: True for name in TERM_NAMES}
    )

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        unknown = set(self.enabled) - set(TERM_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss terms: {sorted(unknown)}")
        for name in TERM_NAMES:
            self.enabled.setdefault(name, False)

    @classmethod
    def only(cls, *names: str, tau: float = 0.1) -> "LossConfig":
        return cls(tau=tau, enabled={name: name in names for name in TERM_NAMES})


@dataclass
class BatchOutputs:
    """Encoder outputs for one paired batch (all unit-norm rows)."""

    r_word_sketch: np.ndarray
    r_visual_sketch: np.ndarray
    r_final_sketch: np.ndarray
    r_word_image: np.ndarray
    r_visual_image: np.ndarray
    r_final_image: np.ndarray


@dataclass
class AdaptedAnchors:
    """Anchor matrices as used by the losses (unit-norm rows) plus their
    cosine-similarity matrices (targets; treated as constants)."""

    word: np.ndarray | None = None
    visual: np.ndarray | None = None
    sim_word: np.ndarray | None = None
    sim_visual: np.ndarray | None = None


def one_hot(class_ids, num_classes: int) -> np.ndarray:
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise ContractError(
            f"class id out of range [0, {num_classes}): {ids.min()}..{ids.max()}"
        )
    g = np.zeros((ids.size, num_classes))
    g[np.arange(ids.size), ids] = 1.0
    return g


# -- graph builders ----------------------------------------------------------


def info_nce_graph(t: Tape, r_sketch: Var, r_image: Var, tau: float) -> Var:
    """-(1/N) sum_i log softmax_j(r_sketch_i . r_image_j / tau) at j=i."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = r_sketch.shape[0]
    logits = t.smul(t.matmul(r_sketch, t.transpose(r_image)), 1.0 / tau)
    log_probs = t.log(t.row_softmax(logits))
    diagonal = t.mul(log_probs, t.constant(np.eye(n)))
    return t.smul(t.sum(diagonal), -1.0 / n)


def anchored_semantic_graph(
    t: Tape, r: Var, anchors: Var, anchor_sim: Var, onehot: Var, tau: float
) -> Var:
    """Cross-entropy between softmax(r . anchors / tau) and the softmax of
    the matching (detached) anchor-similarity row."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = onehot.shape[0]
    targets = t.row_softmax(t.matmul(onehot, t.stop_gradient(anchor_sim)))
    logits = t.smul(t.matmul(r, t.transpose(anchors)), 1.0 / tau)
    log_probs = t.log(t.row_softmax(logits))
    return t.smul(t.sum(t.mul(targets, log_probs)), -1.0 / n)


def anchored_sample_graph(
    t: Tape, r_sketch: Var, r_image: Var, anchor_sim: Var, onehot: Var, tau: float
) -> Var:
    """Cross-entropy between in-batch sketch-image similarity rows and the
    batch-indexed (detached) anchor-similarity rows."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = onehot.shape[0]
    sim_batch = t.matmul(
        t.matmul(onehot, t.stop_gradient(anchor_sim)), t.transpose(onehot)
    )
    targets = t.row_softmax(sim_batch)
    logits = t.smul(t.matmul(r_sketch, t.transpose(r_image)), 1.0 / tau)
    log_probs = t.log(t.row_softmax(logits))
    return t.smul(t.sum(t.mul(targets, log_probs)), -1.0 / n)


# -- value-level operations --------------------------------------------------


def _run_scalar(build, inputs):
    t = Tape()
    build(t)
    return float(t.forward(inputs)[0, 0])


def info_nce(r_sketch, r_image, tau: float) -> float:
    r_s = np.atleast_2d(np.asarray(r_sketch, dtype=np.float64))
    r_i = np.atleast_2d(np.asarray(r_image, dtype=np.float64))
    if r_s.shape != r_i.shape:
        raise ContractError(f"shape mismatch: {r_s.shape} vs {r_i.shape}")

    def build(t):
        info_nce_graph(t, t.input("s", *r_s.shape), t.input("i", *r_i.shape), tau)

    return _run_scalar(build, {"s": r_s, "i": r_i})


def anchored_semantic_loss(r, class_ids, anchors, anchor_sim, tau: float) -> float:
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    anchor_sim = np.asarray(anchor_sim, dtype=np.float64)
    g = one_hot(class_ids, anchors.shape[0])

    def build(t):
        anchored_semantic_graph(
            t,
            t.input("r", *r.shape),
            t.input("a", *anchors.shape),
            t.input("sim", *anchor_sim.shape),
            t.constant(g),
            tau,
        )

    return _run_scalar(build, {"r": r, "a": anchors, "sim": anchor_sim})


def anchored_sample_loss(r_sketch, r_image, class_ids, anchor_sim, tau: float) -> float:
    r_s = np.atleast_2d(np.asarray(r_sketch, dtype=np.float64))
    r_i = np.atleast_2d(np.asarray(r_image, dtype=np.float64))
    anchor_sim = np.asarray(anchor_sim, dtype=np.float64)
    g = one_hot(class_ids, anchor_sim.shape[0])

    def build(t):
        anchored_sample_graph(
            t,
            t.input("s", *r_s.shape),
            t.input("i", *r_i.shape),
            t.input("sim", *anchor_sim.shape),
            t.constant(g),
            tau,
        )

    return _run_scalar(build, {"s": r_s, "i": r_i, "sim": anchor_sim})


def total_loss(
    batch: Batch,
    outputs: BatchOutputs,
    anchors: AdaptedAnchors,
    config: LossConfig,
) -> tuple[float, dict[str, float]]:
    """Equal-weight sum of every enabled term; disabled terms report 0."""
    on = config.enabled
    tau = config.tau
    ids = batch.class_ids
    breakdown = {name: 0.0 for name in TERM_NAMES}
    if on["base"]:
        breakdown["base"] = info_nce(outputs.r_final_sketch, outputs.r_final_image, tau)
    if on["sem_word_sketch"]:
        breakdown["sem_word_sketch"] = anchored_semantic_loss(
            outputs.r_word_sketch, ids, anchors.word, anchors.sim_word, tau
        )
    if on["sem_word_image"]:
        breakdown["sem_word_image"] = anchored_semantic_loss(
            outputs.r_word_image, ids, anchors.word, anchors.sim_word, tau
        )
    if on["sem_visual_sketch"]:
        breakdown["sem_visual_sketch"] = anchored_semantic_loss(
            outputs.r_visual_sketch, ids, anchors.visual, anchors.sim_visual, tau
        )
    if on["sem_visual_image"]:
        breakdown["sem_visual_image"] = anchored_semantic_loss(
            outputs.r_visual_image, ids, anchors.visual, anchors.sim_visual, tau
        )
    if on["sample_word"]:
        breakdown["sample_word"] = anchored_sample_loss(
            outputs.r_word_sketch, outputs.r_word_image, ids, anchors.sim_word, tau
        )
    if on["sample_visual"]:
        breakdown["sample_visual"] = anchored_sample_loss(
            outputs.r_visual_sketch, outputs.r_visual_image, ids, anchors.sim_visual, tau
        )
    return sum(breakdown.values()), breakdown
