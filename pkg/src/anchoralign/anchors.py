"""Per-class anchor vectors: word-space embeddings and visual class centers.

An :class:`AnchorSet` holds, for an ordered list of classes, the word
vector (plus its alternate neighbors), the per-dimension mean and
population standard deviation of the class's image features, and the
cosine-similarity matrices of both anchor families.  Anchor rows are
indexed 0..C-1 in the order of ``class_ids``, which map back to the
dataset's global class ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FeatureSet
from .errors import ConfigError, ContractError, DegenerateAnchorError, MissingClassError

__all__ = [
    "AnchorSet",
    "N_ALTERNATES",
    "compute_visual_anchors",
    "build_similarity_matrix",
    "build_anchor_set",
    "randomize_visual_anchor",
    "randomize_word_anchor",
]

# Each class carries exactly this many alternate word vectors (its nearest
# neighbors in the word space) when alternates are present at all.
N_ALTERNATES = 10


@dataclass
class AnchorSet:
    class_ids: list[int]
    class_names: list[str]
    word_vectors: np.ndarray      # (C, Dw)
    word_alternates: np.ndarray | None  # (C, K, Dw); None when not available
    visual_means: np.ndarray      # (C, Dv)
    visual_stds: np.ndarray       # (C, Dv), entrywise >= 0
    sim_word: np.ndarray          # (C, C) cosine, unit diagonal
    sim_visual: np.ndarray

    @property
    def num_classes(self):
        return len(self.class_ids)

    def anchor_row(self, class_id: int) -> int:
        """Anchor row index for a global class id."""
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise MissingClassError(f"class id {class_id} has no anchor") from None


def compute_visual_anchors(features: FeatureSet, class_ids=None):
    """Per-class mean and population std of image-domain features.

    Statistics are taken over the raw (un-normalized) vectors in float64.
    """
    images = features.restrict_domain("image")
    if class_ids is None:
        class_ids = sorted(int(c) for c in np.unique(images.labels))
    vectors = images.vectors.astype(np.float64)
    means = np.empty((len(class_ids), features.dim))
    stds = np.empty_like(means)
    for row, cid in enumerate(class_ids):
        idx = np.flatnonzero(images.labels == cid)
        if idx.size == 0:
            name = (
                features.class_names[cid]
                if 0 <= cid < len(features.class_names)
                else str(cid)
            )
            raise MissingClassError(f"class {name!r} (id {cid}) has no image features")
        cls = vectors[idx]
        means[row] = cls.mean(axis=0)
        stds[row] = cls.std(axis=0)  # population std (ddof=0)
    return means, stds


def build_similarity_matrix(anchor_matrix) -> np.ndarray:
    """Cosine similarity of every anchor pair; symmetric with unit diagonal."""
    m = np.asarray(anchor_matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        rows = np.flatnonzero(norms == 0.0).tolist()
        raise DegenerateAnchorError(f"zero anchor row(s) at index {rows}")
    unit = m / norms[:, None]
    sim = unit @ unit.T
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, 1.0)
    return sim


def build_anchor_set(
    image_features: FeatureSet,
    word_vectors,
    word_alternates,
    class_ids,
    class_names=None,
) -> AnchorSet:
    """Assemble the anchor set for ``class_ids`` (global ids, in order).

    ``word_vectors`` rows and ``word_alternates`` groups must follow the
    same order as ``class_ids``.
    """
    class_ids = [int(c) for c in class_ids]
    if class_names is None:
        class_names = [image_features.class_names[c] for c in class_ids]
    word_vectors = np.asarray(word_vectors, dtype=np.float64)
    if word_vectors.shape[0] != len(class_ids):
        raise ContractError(
            f"expected {len(class_ids)} word vectors, got {word_vectors.shape[0]}"
        )
    if word_alternates is not None:
        word_alternates = np.asarray(word_alternates, dtype=np.float64)
        if word_alternates.ndim != 3 or word_alternates.shape[0] != len(class_ids):
            raise ContractError("word_alternates must be (classes, 10, Dw)")
        if word_alternates.shape[1] != N_ALTERNATES:
            raise ContractError(
                f"expected exactly {N_ALTERNATES} alternates per class, "
                f"got {word_alternates.shape[1]}"
            )
        if word_alternates.shape[2] != word_vectors.shape[1]:
            raise ContractError("word_alternates dim differs from word_vectors")
    means, stds = compute_visual_anchors(image_features, class_ids)
    return AnchorSet(
        class_ids=class_ids,
        class_names=list(class_names),
        word_vectors=word_vectors,
        word_alternates=word_alternates,
        visual_means=means,
        visual_stds=stds,
        sim_word=build_similarity_matrix(word_vectors),
        sim_visual=build_similarity_matrix(means),
    )


def randomize_visual_anchor(anchor_set: AnchorSet, class_index: int, rng) -> np.ndarray:
    """Draw mean + std * eps with eps i.i.d. standard normal per dimension."""
    mean = anchor_set.visual_means[class_index]
    std = anchor_set.visual_stds[class_index]
    return mean + std * rng.standard_normal(mean.shape[0])


def randomize_word_anchor(
    anchor_set: AnchorSet, class_index: int, rng, swap_prob: float = 0.5
) -> np.ndarray:
    """Keep the class word vector, or swap it for one of its alternates.

    With probability ``swap_prob`` one of the stored alternates is chosen
    uniformly; otherwise the original vector is returned.
    """
    if not 0.0 <= swap_prob <= 1.0:
        raise ConfigError(f"swap_prob must be in [0, 1], got {swap_prob}")
    if anchor_set.word_alternates is None:
        raise ConfigError("anchor set has no word alternates; cannot randomize")
    if rng.random() < swap_prob:
        k = int(rng.integers(anchor_set.word_alternates.shape[1]))
        return anchor_set.word_alternates[class_index, k].copy()
    return anchor_set.word_vectors[class_index].copy()
