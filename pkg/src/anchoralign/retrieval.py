"""Cosine ranking and retrieval metrics (AP, mAP, truncated mAP, P@K).

A ranked item is relevant when its class matches the query's.  Ranking is
by descending cosine similarity with ties broken by ascending gallery
index, so reports are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorSet
from .dataio import FeatureSet
from .errors import ContractError

logger = logging.getLogger(__name__)

__all__ = [
    "Gallery",
    "RetrievalReport",
    "rank_gallery",
    "average_precision",
    "evaluate",
    "make_generalized_gallery",
    "select_images_by_anchor_distance",
]

TAG_UNSEEN = "unseen-test"
TAG_INJECTED = "seen-injected"


def _unit_rows(m):
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0.0, 1.0, norms)


@dataclass
class Gallery:
    """Immutable ranked-against set: unit-norm features plus labels."""

    features: np.ndarray
    labels: np.ndarray
    source_tags: np.ndarray

    def __post_init__(self):
        self.features = _unit_rows(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.source_tags = np.asarray(self.source_tags, dtype="U13")

    def __len__(self):
        return len(self.features)

    @classmethod
    def from_feature_set(cls, fs: FeatureSet, tag: str = TAG_UNSEEN) -> "Gallery":
        return cls(fs.vectors, fs.labels, np.full(len(fs), tag, dtype="U13"))


@dataclass
class RetrievalReport:
    map: float
    map_at_200: float
    p_at_k: dict[int, float]
    per_query_ap: list[float] = field(default_factory=list)

    def table(self) -> str:
        rows = [("mAP", self.map), ("mAP@200", self.map_at_200)]
        rows += [(f"P@{k}", v) for k, v in sorted(self.p_at_k.items())]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:.4f}" for name, value in rows]
        return "\n".join(lines)

    def to_csv(self, path, per_query: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerow(["map", f"{self.map:.10f}"])
            writer.writerow(["map_at_200", f"{self.map_at_200:.10f}"])
            for k, v in sorted(self.p_at_k.items()):
                writer.writerow([f"p_at_{k}", f"{v:.10f}"])
            if per_query:
                for i, ap in enumerate(self.per_query_ap):
                    writer.writerow([f"query_{i}_ap", f"{ap:.10f}"])


def rank_gallery(query, gallery: Gallery) -> np.ndarray:
    """Gallery indices sorted by descending cosine similarity to the query."""
    if len(gallery) == 0:
        raise ContractError("cannot rank an empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    scores = gallery.features @ q
    return np.argsort(-scores, kind="stable")


def average_precision(relevance, truncate_at: int | None = None) -> float:
    """AP of a ranked binary relevance list.

    Untruncated: mean of precision@r over relevant ranks r, divided by the
    number of relevant items.  Truncated at K: only ranks <= K contribute
    and the divisor is min(R, K).  No relevant items gives 0.
    """
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.size == 0:
        raise ContractError("relevance list is empty")
    total_relevant = int(rel.sum())
    if total_relevant == 0:
        return 0.0
    precision_at = np.cumsum(rel) / np.arange(1, rel.size + 1)
    if truncate_at is None:
        return float((precision_at * rel).sum() / total_relevant)
    k = int(truncate_at)
    head = slice(0, k)
    denom = min(total_relevant, k)
    return float((precision_at[head] * rel[head]).sum() / denom)


def evaluate(queries: FeatureSet, gallery: Gallery, ks=(100,)) -> RetrievalReport:
    """Rank the gallery for every query and aggregate AP/mAP/P@K."""
    if len(gallery) == 0:
        raise ContractError("cannot evaluate against an empty gallery")
    q = _unit_rows(queries.vectors)
    scores = q @ gallery.features.T
    order = np.argsort(-scores, axis=1, kind="stable")
    rel = (gallery.labels[order] == queries.labels[:, None]).astype(np.float64)

    per_query = [average_precision(rel[i]) for i in range(len(q))]
    per_query_200 = [average_precision(rel[i], truncate_at=200) for i in range(len(q))]
    p_at_k = {}
    for k in ks:
        k = int(k)
        p_at_k[k] = float(rel[:, :k].sum(axis=1).mean() / k)
    return RetrievalReport(
        map=float(np.mean(per_query)),
        map_at_200=float(np.mean(per_query_200)),
        p_at_k=p_at_k,
        per_query_ap=per_query,
    )


def make_generalized_gallery(
    train_images: FeatureSet, test_images: FeatureSet, fraction: float, rng
) -> Gallery:
    """Gallery of all test images plus floor(fraction * count) train images
    per seen class, tagged so injected rows remain identifiable."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must be in (0, 1), got {fraction}")
    picked = []
    for cid, idx in sorted(train_images.indices_by_class().items()):
        k = int(np.floor(fraction * idx.size))
        if k == 0:
            logger.warning(
                "class %s has %d images; fraction %.2f injects none",
                train_images.class_names[cid], idx.size, fraction,
            )
            continue
        chosen = rng.choice(idx, size=k, replace=False)
        picked.append(np.sort(chosen))
    features = [test_images.vectors]
    labels = [test_images.labels]
    tags = [np.full(len(test_images), TAG_UNSEEN, dtype="U13")]
    if picked:
        sel = np.concatenate(picked)
        features.append(train_images.vectors[sel])
        labels.append(train_images.labels[sel])
        tags.append(np.full(sel.size, TAG_INJECTED, dtype="U13"))
    return Gallery(
        np.vstack(features), np.concatenate(labels), np.concatenate(tags)
    )


def select_images_by_anchor_distance(
    images: FeatureSet, anchors: AnchorSet, n: int, mode: str
) -> FeatureSet:
    """Per class, the n images closest to (or farthest from) the class's
    visual anchor by cosine distance; classes smaller than n are kept whole."""
    if mode not in ("closest", "farthest"):
        raise ContractError(f"mode must be 'closest' or 'farthest', got {mode!r}")
    keep = []
    for cid, idx in sorted(images.indices_by_class().items()):
        row = anchors.anchor_row(cid)
        mean = anchors.visual_means[row]
        mean_unit = mean / max(np.linalg.norm(mean), 1e-300)
        feats = _unit_rows(images.vectors[idx])
        distance = 1.0 - feats @ mean_unit
        if mode == "farthest":
            distance = -distance
        take = n
        if n > idx.size:
            logger.warning(
                "class %s has only %d images, requested %d; taking all",
                images.class_names[cid], idx.size, n,
            )
            take = idx.size
        order = np.argsort(distance, kind="stable")[:take]
        keep.append(np.sort(idx[order]))
    return images.subset(np.concatenate(keep))
