"""Optimization loop: class-paired batches, Adam with linear warmup and
cosine decay, reduced trunk gradients, ablation wiring, and validation
mAP checkpoints along the way.

Ablation rows map to feature toggles as:

    base  contrastive term only, no anchor machinery
    a1    + visual anchors (semantic + sample terms)
    a2    + word anchors (all seven terms)
    b1    a2 + randomized anchor inputs
    b2    a2 + graph-convolution adaptation
    ours  everything
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import anchorgraph, encoder, losses
from ._kernels import adam_update
from .anchors import AnchorSet, randomize_visual_anchor, randomize_word_anchor
from .dataio import FeatureSet, SplitSpec, read_fvec, write_fvec
from .errors import ConfigError, ContractError, DataError, TrainingDivergedError
from .retrieval import Gallery, evaluate
from .tape import Tape

logger = logging.getLogger(__name__)

__all__ = [
    "ABLATIONS",
    "AblationSpec",
    "TrainConfig",
    "AdamState",
    "ModelParams",
    "TrainingData",
    "CurvePoint",
    "TrainResult",
    "lr_at",
    "adam_step",
    "sample_batch",
    "init_model_params",
    "assemble_training_data",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class AblationSpec:
    terms: tuple[str, ...]
    use_word: bool
    use_visual: bool
    randomize: bool
    gcn: bool


_SEM_VISUAL = ("sem_visual_sketch", "sem_visual_image", "sample_visual")
_SEM_WORD = ("sem_word_sketch", "sem_word_image", "sample_word")

ABLATIONS = {
    "base": AblationSpec(("base",), False, False, False, False),
    "a1": AblationSpec(("base",) + _SEM_VISUAL, False, True, False, False),
    "a2": AblationSpec(("base",) + _SEM_VISUAL + _SEM_WORD, True, True, False, False),
    "b1": AblationSpec(("base",) + _SEM_VISUAL + _SEM_WORD, True, True, True, False),
    "b2": AblationSpec(("base",) + _SEM_VISUAL + _SEM_WORD, True, True, False, True),
    "ours": AblationSpec(("base",) + _SEM_VISUAL + _SEM_WORD, True, True, True, True),
}


@dataclass
class TrainConfig:
    batch_size: int = 16
    iterations: int = 1500
    base_lr: float = 1e-4
    min_lr: float | None = None  # defaults to base_lr / 5
    warmup_iters: int = 150
    backbone_grad_scale: float = 0.1
    tau: float = 0.1
    seed: int = 0
    ablation: str = "ours"
    eval_every: int = 100
    swap_prob: float = 0.5
    val_per_class: int = 64
    trunk_hidden: int = 64
    trunk_dim: int = 512
    proj_dim: int = 512
    attn_dim: int = 64
    gcn_layers: int = 4

    def __post_init__(self):
        if self.min_lr is None:
            self.min_lr = self.base_lr / 5.0
        if self.ablation not in ABLATIONS:
            raise ConfigError(
                f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.iterations > 0 and self.warmup_iters >= self.iterations:
            raise ConfigError("warmup_iters must be < iterations")
        if not 0.0 < self.min_lr <= self.base_lr:
            raise ConfigError("need 0 < min_lr <= base_lr")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def spec(self) -> AblationSpec:
        return ABLATIONS[self.ablation]

    def loss_config(self) -> losses.LossConfig:
        """The per-term toggle view of this configuration's ablation row."""
        return losses.LossConfig.only(*self.spec.terms, tau=self.tau)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr.

    Warmup evaluates base_lr * (i + 1) / warmup so iteration 0 takes a
    nonzero step; the two pieces agree exactly at the boundary.
    """
    if config.warmup_iters > 0 and iteration < config.warmup_iters:
        return config.base_lr * (iteration + 1) / config.warmup_iters
    span = config.iterations - config.warmup_iters
    if span <= 0:
        return config.min_lr
    progress = (iteration - config.warmup_iters) / span
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (
        1.0 + math.cos(math.pi * progress)
    )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in tensors.items()},
            v={k: np.zeros_like(t) for k, t in tensors.items()},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Bias-corrected Adam update, in place; tensors without a gradient are
    left untouched (their moments stay zero)."""
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    for name, grad in grads.items():
        adam_update(
            tensors[name], grad, state.m[name], state.v[name],
            lr, state.beta1, state.beta2, state.eps, bias1, bias2,
        )


@dataclass
class ModelParams:
    """Every trainable tensor, keyed by dotted component names."""

    tensors: dict[str, np.ndarray]
    arch: encoder.ArchConfig

    def copy(self) -> "ModelParams":
        return ModelParams({k: t.copy() for k, t in self.tensors.items()}, self.arch)


def init_model_params(rng, arch: encoder.ArchConfig) -> ModelParams:
    """Initialize every component (independent of the ablation, so equal
    seeds give identical starting points across configurations)."""
    tensors = encoder.init_encoder_params(rng, arch)
    tensors["anchor_proj_word.W"] = anchorgraph.xavier_uniform(
        rng, arch.word_dim, arch.proj_dim
    )
    tensors["anchor_proj_word.b"] = np.zeros((1, arch.proj_dim))
    tensors["anchor_proj_visual.W"] = anchorgraph.xavier_uniform(
        rng, arch.input_dim, arch.proj_dim
    )
    tensors["anchor_proj_visual.b"] = np.zeros((1, arch.proj_dim))
    for i in range(arch.gcn_layers):
        tensors[f"gcn.W{i}"] = anchorgraph.xavier_uniform(
            rng, arch.proj_dim, arch.proj_dim
        )
    return ModelParams(tensors, arch)


# -- data plumbing -----------------------------------------------------------


@dataclass
class TrainingData:
    train_sketches: FeatureSet
    train_images: FeatureSet
    val_sketches: FeatureSet
    val_images: FeatureSet
    seen_classes: list[int]


def _subsample_per_class(fs: FeatureSet, per_class: int, rng) -> FeatureSet:
    keep = []
    for cid, idx in sorted(fs.indices_by_class().items()):
        if idx.size > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        keep.append(idx)
    return fs.subset(np.concatenate(keep)) if keep else fs


def assemble_training_data(
    images: FeatureSet,
    sketches: FeatureSet,
    split: SplitSpec,
    val_per_class: int = 64,
    rng=None,
) -> TrainingData:
    """Restrict to the split's seen classes for training; validation queries
    and gallery come from the val classes (or the unseen classes when no
    dedicated validation subset was carved), capped per class."""
    rng = rng if rng is not None else np.random.default_rng(0)
    seen = sorted(split.seen_classes)
    val_ids = sorted(split.val_classes) if split.val_classes else sorted(split.unseen_classes)
    if set(seen) & set(val_ids):
        raise DataError("validation classes overlap the training classes")
    return TrainingData(
        train_sketches=sketches.restrict_classes(seen),
        train_images=images.restrict_classes(seen),
        val_sketches=_subsample_per_class(
            sketches.restrict_classes(val_ids), val_per_class, rng
        ),
        val_images=_subsample_per_class(
            images.restrict_classes(val_ids), val_per_class, rng
        ),
        seen_classes=seen,
    )


def sample_batch(
    sketches: FeatureSet,
    images: FeatureSet,
    seen_classes: list[int],
    batch_size: int,
    rng,
    index: tuple[dict, dict] | None = None,
) -> losses.Batch:
    """Draw batch_size classes uniformly with replacement, then one sketch
    and one image uniformly from each; class ids are anchor-row positions."""
    sk_idx, im_idx = index if index is not None else (
        sketches.indices_by_class(), images.indices_by_class()
    )
    for cid in seen_classes:
        if sk_idx.get(cid, np.empty(0)).size == 0:
            raise DataError(f"class {cid} has no sketches to sample")
        if im_idx.get(cid, np.empty(0)).size == 0:
            raise DataError(f"class {cid} has no images to sample")
    rows_s, rows_i, gammas = [], [], []
    for _ in range(batch_size):
        pos = int(rng.integers(len(seen_classes)))
        cid = seen_classes[pos]
        rows_s.append(sk_idx[cid][int(rng.integers(sk_idx[cid].size))])
        rows_i.append(im_idx[cid][int(rng.integers(im_idx[cid].size))])
        gammas.append(pos)
    return losses.Batch(
        sketches.vectors[rows_s].astype(np.float64),
        images.vectors[rows_i].astype(np.float64),
        np.asarray(gammas),
    )


# -- the per-iteration graph --------------------------------------------------


class _TrainGraph:
    """One reusable tape for the whole per-iteration computation."""

    def __init__(self, config: TrainConfig, arch: encoder.ArchConfig, n_seen: int):
        spec = config.spec
        self.spec = spec
        self.term_vars = {}
        n = config.batch_size
        t = Tape(np.float64)
        self.tape = t

        pnames = list(encoder._ENCODER_TENSORS)
        if spec.use_word:
            pnames += ["anchor_proj_word.W", "anchor_proj_word.b"]
        if spec.use_visual:
            pnames += ["anchor_proj_visual.W", "anchor_proj_visual.b"]
        if spec.gcn:
            pnames += [f"gcn.W{i}" for i in range(arch.gcn_layers)]
        self.param_names = pnames

        shapes = _tensor_shapes(arch)
        p = {name: t.input(name, *shapes[name]) for name in pnames}

        x_skt = t.input("batch.sketches", n, arch.input_dim)
        x_img = t.input("batch.images", n, arch.input_dim)
        rw_s, rv_s, rf_s = encoder.encode_graph(
            t, x_skt, p, arch, config.backbone_grad_scale
        )
        rw_i, rv_i, rf_i = encoder.encode_graph(
            t, x_img, p, arch, config.backbone_grad_scale
        )

        self.anchor_vars = {}
        sim_w = sim_v = anc_w = anc_v = None
        if spec.use_word or spec.use_visual:
            onehot = t.input("batch.onehot", n, n_seen)
            proj = {}
            if spec.use_word:
                word_in = t.input("anchors.word_in", n_seen, arch.word_dim)
                proj["word"] = t.add(
                    t.matmul(word_in, p["anchor_proj_word.W"]), p["anchor_proj_word.b"]
                )
            if spec.use_visual:
                visual_in = t.input("anchors.visual_in", n_seen, arch.input_dim)
                proj["visual"] = t.add(
                    t.matmul(visual_in, p["anchor_proj_visual.W"]),
                    p["anchor_proj_visual.b"],
                )
            if spec.gcn:
                weights = [p[f"gcn.W{i}"] for i in range(arch.gcn_layers)]
                anc_w, anc_v = anchorgraph.adapted_anchors_graph(
                    t, proj["word"], proj["visual"], weights
                )
            else:
                if spec.use_word:
                    anc_w = t.row_normalize(proj["word"])
                if spec.use_visual:
                    anc_v = t.row_normalize(proj["visual"])
            if anc_w is not None:
                sim_w = t.matmul(anc_w, t.transpose(anc_w))
                self.anchor_vars["word"] = anc_w
            if anc_v is not None:
                sim_v = t.matmul(anc_v, t.transpose(anc_v))
                self.anchor_vars["visual"] = anc_v

        tau = config.tau
        terms = {}
        if "base" in spec.terms:
            terms["base"] = losses.info_nce_graph(t, rf_s, rf_i, tau)
        if "sem_word_sketch" in spec.terms:
            terms["sem_word_sketch"] = losses.anchored_semantic_graph(
                t, rw_s, anc_w, sim_w, onehot, tau
            )
            terms["sem_word_image"] = losses.anchored_semantic_graph(
                t, rw_i, anc_w, sim_w, onehot, tau
            )
        if "sem_visual_sketch" in spec.terms:
            terms["sem_visual_sketch"] = losses.anchored_semantic_graph(
                t, rv_s, anc_v, sim_v, onehot, tau
            )
            terms["sem_visual_image"] = losses.anchored_semantic_graph(
                t, rv_i, anc_v, sim_v, onehot, tau
            )
        if "sample_word" in spec.terms:
            terms["sample_word"] = losses.anchored_sample_graph(
                t, rw_s, rw_i, sim_w, onehot, tau
            )
        if "sample_visual" in spec.terms:
            terms["sample_visual"] = losses.anchored_sample_graph(
                t, rv_s, rv_i, sim_v, onehot, tau
            )
        self.term_vars = terms

        total = None
        for var in terms.values():
            total = var if total is None else t.add(total, var)
        self.total_var = total

    def run(self, tensors, batch, n_seen, anchor_inputs):
        bindings = {name: tensors[name] for name in self.param_names}
        bindings["batch.sketches"] = batch.sketches
        bindings["batch.images"] = batch.images
        if self.spec.use_word or self.spec.use_visual:
            bindings["batch.onehot"] = losses.one_hot(batch.class_ids, n_seen)
            bindings.update(anchor_inputs)
        total = float(self.tape.forward(bindings)[0, 0])
        breakdown = {name: 0.0 for name in losses.TERM_NAMES}
        for name, var in self.term_vars.items():
            breakdown[name] = float(self.tape.value(var)[0, 0])
        grads = self.tape.backward()
        param_grads = {name: grads[name] for name in self.param_names}
        return total, breakdown, param_grads


def _tensor_shapes(arch: encoder.ArchConfig) -> dict[str, tuple[int, int]]:
    probe = init_model_params(np.random.default_rng(0), arch)
    return {name: t.shape for name, t in probe.tensors.items()}


class _EvalGraph:
    """Encodes a fixed-size query set and gallery set with current params
    (retrieval path only; the projection heads play no part in ranking)."""

    def __init__(self, arch: encoder.ArchConfig, n_queries: int, n_gallery: int,
                 grad_scale: float):
        t = Tape(np.float64)
        self.tape = t
        shapes = _tensor_shapes(arch)
        p = {
            name: t.input(name, *shapes[name])
            for name in encoder._RETRIEVAL_TENSORS
        }
        q = t.input("queries", n_queries, arch.input_dim)
        g = t.input("gallery", n_gallery, arch.input_dim)
        self.rq = encoder.encode_retrieval_graph(t, q, p, arch, grad_scale)
        self.rg = encoder.encode_retrieval_graph(t, g, p, arch, grad_scale)

    def encode(self, tensors, queries, gallery):
        bindings = {name: tensors[name] for name in encoder._RETRIEVAL_TENSORS}
        bindings["queries"] = queries
        bindings["gallery"] = gallery
        self.tape.forward(bindings)
        return self.tape.value(self.rq), self.tape.value(self.rg)


# -- training loop ------------------------------------------------------------


@dataclass
class CurvePoint:
    iteration: int
    lr: float
    total: float
    terms: dict[str, float]
    val_map: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[CurvePoint]
    config: TrainConfig
    final_val_map: float

    @property
    def val_points(self) -> list[tuple[int, float]]:
        return [(p.iteration, p.val_map) for p in self.curve if p.val_map is not None]

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["iteration", "lr", "total_loss"]
                + [f"loss_{n}" for n in losses.TERM_NAMES]
                + ["val_map"]
            )
            for p in self.curve:
                writer.writerow(
                    [p.iteration, f"{p.lr:.12g}", f"{p.total:.12g}"]
                    + [f"{p.terms[n]:.12g}" for n in losses.TERM_NAMES]
                    + ["" if p.val_map is None else f"{p.val_map:.12g}"]
                )

    def write_term_log_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "term", "value"])
            for p in self.curve:
                for name in losses.TERM_NAMES:
                    writer.writerow([p.iteration, name, f"{p.terms[name]:.12g}"])


def _anchor_inputs(anchor_set, spec, swap_prob, rng):
    """Per-iteration anchor input matrices (randomized when enabled)."""
    out = {}
    if anchor_set is None:
        return out
    c = anchor_set.num_classes
    if spec.use_word:
        if spec.randomize:
            rows = [
                randomize_word_anchor(anchor_set, i, rng, swap_prob) for i in range(c)
            ]
            out["anchors.word_in"] = np.vstack(rows)
        else:
            out["anchors.word_in"] = anchor_set.word_vectors
    if spec.use_visual:
        if spec.randomize:
            rows = [randomize_visual_anchor(anchor_set, i, rng) for i in range(c)]
            out["anchors.visual_in"] = np.vstack(rows)
        else:
            out["anchors.visual_in"] = anchor_set.visual_means
    return out


def _validation_map(eval_graph, tensors, data: TrainingData) -> float:
    rq, rg = eval_graph.encode(
        tensors,
        data.val_sketches.vectors.astype(np.float64),
        data.val_images.vectors.astype(np.float64),
    )
    queries = FeatureSet(
        rq.astype(np.float32), data.val_sketches.labels,
        data.val_sketches.domains, data.val_sketches.class_names,
    )
    gallery = Gallery(rg, data.val_images.labels,
                      np.full(len(rg), "unseen-test", dtype="U13"))
    return evaluate(queries, gallery).map


def train(
    data: TrainingData,
    anchor_set: AnchorSet | None,
    config: TrainConfig,
) -> TrainResult:
    """Run the full pipeline for ``config.iterations`` steps.

    Per iteration: refresh anchor inputs (randomized when enabled), project
    and adapt them, encode the batch, sum the enabled losses, backpropagate,
    and take one Adam step at the scheduled learning rate.  Validation mAP
    is recorded at iteration 0, every ``eval_every`` iterations, and at the
    final iteration.  A non-finite loss aborts with the iteration index.
    """
    spec = config.spec
    if (spec.use_word or spec.use_visual) and anchor_set is None:
        raise ContractError(f"ablation {config.ablation!r} needs an anchor set")
    n_seen = len(data.seen_classes)
    if anchor_set is not None and anchor_set.num_classes != n_seen:
        raise ContractError(
            f"anchor set covers {anchor_set.num_classes} classes, "
            f"training data has {n_seen}"
        )

    seq = np.random.SeedSequence(config.seed)
    init_rng, batch_rng, anchor_rng = (
        np.random.default_rng(s) for s in seq.spawn(3)
    )
    arch = encoder.ArchConfig(
        input_dim=data.train_images.dim,
        word_dim=anchor_set.word_vectors.shape[1] if anchor_set is not None else 48,
        trunk_hidden=config.trunk_hidden,
        trunk_dim=config.trunk_dim,
        proj_dim=config.proj_dim,
        attn_dim=config.attn_dim,
        gcn_layers=config.gcn_layers,
    )
    params = init_model_params(init_rng, arch)
    state = AdamState.for_params(params.tensors)
    graph = _TrainGraph(config, arch, n_seen) if config.iterations > 0 else None
    eval_graph = _EvalGraph(
        arch, len(data.val_sketches), len(data.val_images), config.backbone_grad_scale
    )
    index = (data.train_sketches.indices_by_class(), data.train_images.indices_by_class())

    curve: list[CurvePoint] = []
    zero_terms = {name: 0.0 for name in losses.TERM_NAMES}
    val0 = _validation_map(eval_graph, params.tensors, data)
    curve.append(CurvePoint(0, lr_at(0, config), 0.0, dict(zero_terms), val0))

    last_val = val0
    for it in range(config.iterations):
        lr = lr_at(it, config)
        batch = sample_batch(
            data.train_sketches, data.train_images, data.seen_classes,
            config.batch_size, batch_rng, index=index,
        )
        anchor_inputs = _anchor_inputs(anchor_set, spec, config.swap_prob, anchor_rng)
        try:
            total, breakdown, grads = graph.run(
                params.tensors, batch, n_seen, anchor_inputs
            )
        except FloatingPointError as exc:
            raise TrainingDivergedError(it, str(exc)) from exc
        if not math.isfinite(total):
            raise TrainingDivergedError(it)
        adam_step(params.tensors, grads, state, lr)

        done = it + 1
        val = None
        if done % config.eval_every == 0 or done == config.iterations:
            val = _validation_map(eval_graph, params.tensors, data)
            last_val = val
        curve.append(CurvePoint(done, lr, total, breakdown, val))

    return TrainResult(params=params, curve=curve, config=config,
                       final_val_map=last_val)


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(params: ModelParams, directory) -> None:
    """One fvec container per tensor plus a JSON index with the shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, tensor in params.tensors.items():
        fname = name.replace(".", "_") + ".fvec"
        fs = FeatureSet(
            tensor.astype(np.float32),
            np.zeros(tensor.shape[0], dtype=np.int64),
            ["param"] * tensor.shape[0],
            [name],
        )
        write_fvec(fs, directory / fname)
        entries[name] = {"file": fname, "shape": list(tensor.shape)}
    index = {
        "tensors": entries,
        "arch": {
            "input_dim": params.arch.input_dim,
            "word_dim": params.arch.word_dim,
            "trunk_hidden": params.arch.trunk_hidden,
            "trunk_dim": params.arch.trunk_dim,
            "proj_dim": params.arch.proj_dim,
            "attn_dim": params.arch.attn_dim,
            "gcn_layers": params.arch.gcn_layers,
        },
    }
    (directory / "checkpoint.json").write_text(json.dumps(index, indent=2))


def load_checkpoint(directory) -> ModelParams:
    directory = Path(directory)
    index = json.loads((directory / "checkpoint.json").read_text())
    tensors = {}
    for name, entry in index["tensors"].items():
        fs = read_fvec(directory / entry["file"])
        tensor = fs.vectors.astype(np.float64)
        if list(tensor.shape) != entry["shape"]:
            raise ContractError(
                f"checkpoint tensor {name} has shape {list(tensor.shape)}, "
                f"index says {entry['shape']}"
            )
        tensors[name] = tensor
    return ModelParams(tensors, encoder.ArchConfig(**index["arch"]))
