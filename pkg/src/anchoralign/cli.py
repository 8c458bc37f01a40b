"""Command-line driver: every experiment is a subcommand emitting CSV/fvec
artifacts into an output directory (flag --out, or $ANCHORALIGN_OUT).

Data directories follow the layout written by ``gen-synthetic``:
images.fvec, sketches.fvec, words.fvec, word_alternates.fvec, split.json.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, retrieval, trainer
from .anchors import AnchorSet, N_ALTERNATES, build_anchor_set
from .encoder import encode_retrieval_batch
from .errors import AnchorAlignError

DATA_FILES = {
    "images": "images.fvec",
    "sketches": "sketches.fvec",
    "words": "words.fvec",
    "alternates": "word_alternates.fvec",
    "split": "split.json",
}

CONFIG_FLAGS = (
    "batch_size", "iterations", "base_lr", "min_lr", "warmup_iters",
    "backbone_grad_scale", "tau", "seed", "ablation", "eval_every",
    "swap_prob", "val_per_class", "trunk_hidden", "trunk_dim", "proj_dim",
    "attn_dim", "gcn_layers",
)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ANCHORALIGN_OUT")
    if out is None:
        raise AnchorAlignError("no output directory: pass --out or set ANCHORALIGN_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_manifest(out: Path, command: str, config, extra=None) -> None:
    manifest = {
        "command": command,
        "config": dataclasses.asdict(config) if config is not None else None,
        "git_describe": _git_describe(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": extra or [],
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def _add_data_flags(parser):
    parser.add_argument("--data", type=Path, help="dataset directory (gen-synthetic layout)")
    for key in DATA_FILES:
        parser.add_argument(f"--{key}", type=Path, help=f"override path to {DATA_FILES[key]}")


def _data_path(args, key) -> Path:
    override = getattr(args, key)
    if override is not None:
        return override
    if args.data is None:
        raise AnchorAlignError(f"pass --data or --{key}")
    return args.data / DATA_FILES[key]


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON file with config defaults")
    for name in CONFIG_FLAGS:
        flag = "--" + name.replace("_", "-")
        if name == "ablation":
            parser.add_argument(flag, choices=sorted(trainer.ABLATIONS), default=None)
        elif name in ("batch_size", "iterations", "warmup_iters", "seed", "eval_every",
                      "val_per_class", "trunk_hidden", "trunk_dim", "proj_dim",
                      "attn_dim", "gcn_layers"):
            parser.add_argument(flag, type=int, default=None)
        else:
            parser.add_argument(flag, type=float, default=None)


def _train_config(args, **forced) -> trainer.TrainConfig:
    settings = {}
    if getattr(args, "config", None):
        settings.update(json.loads(Path(args.config).read_text()))
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    settings.update(forced)
    unknown = set(settings) - set(CONFIG_FLAGS)
    if unknown:
        raise AnchorAlignError(f"unknown config keys: {sorted(unknown)}")
    return trainer.TrainConfig(**settings)


def _load_dataset(args):
    images = dataio.read_fvec(_data_path(args, "images"))
    sketches = dataio.read_fvec(_data_path(args, "sketches"))
    split = dataio.SplitSpec.from_json(_data_path(args, "split"))
    return images, sketches, split


def _load_anchor_inputs(args):
    words = dataio.read_fvec(_data_path(args, "words"))
    alternates = dataio.read_fvec(_data_path(args, "alternates"))
    return words, alternates


def _anchor_set_for(images, words, alternates, class_ids) -> AnchorSet:
    word_rows = []
    groups = []
    for cid in class_ids:
        rows = np.flatnonzero(words.labels == cid)
        if rows.size == 0:
            raise AnchorAlignError(f"word-vector file has no row for class id {cid}")
        word_rows.append(words.vectors[rows[0]])
        idx = np.flatnonzero(alternates.labels == cid)
        if idx.size != N_ALTERNATES:
            raise AnchorAlignError(
                f"alternates file must hold exactly {N_ALTERNATES} rows for "
                f"class id {cid}, found {idx.size}"
            )
        groups.append(alternates.vectors[idx])
    return build_anchor_set(images, np.vstack(word_rows), np.stack(groups), class_ids)


def _encoded_feature_set(fs, params, grad_scale=0.1):
    r_final = encode_retrieval_batch(
        fs.vectors.astype(np.float64), params.tensors, params.arch, grad_scale
    )
    return dataio.FeatureSet(
        r_final.astype(np.float32), fs.labels, fs.domains, fs.class_names
    )


# -- subcommands ---------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    data = dataio.generate_synthetic(
        classes=args.classes, per_class=args.per_class, dim=args.dim,
        domain_gap=args.domain_gap, noise=args.noise, rng=rng,
        word_dim=args.word_dim,
    )
    split = dataio.make_zero_shot_split(
        args.classes, args.unseen, rng, val_classes=args.val_classes
    )
    dataio.write_fvec(data.images, out / DATA_FILES["images"])
    dataio.write_fvec(data.sketches, out / DATA_FILES["sketches"])
    dataio.write_fvec(data.word_feature_set(), out / DATA_FILES["words"])
    dataio.write_fvec(data.alternates_feature_set(), out / DATA_FILES["alternates"])
    prototypes = dataio.FeatureSet(
        data.prototypes.astype(np.float32),
        np.arange(args.classes),
        ["image"] * args.classes,
        data.class_names,
    )
    dataio.write_fvec(prototypes, out / "prototypes.fvec")
    split.to_json(out / DATA_FILES["split"])
    _write_run_manifest(out, "gen-synthetic", None, sorted(DATA_FILES.values()))
    print(f"wrote synthetic dataset ({args.classes} classes) to {out}")
    return 0


def cmd_compute_anchors(args) -> int:
    out = _out_dir(args)
    images, _, split = _load_dataset(args)
    words, alternates = _load_anchor_inputs(args)
    seen = sorted(split.seen_classes)
    anchor_set = _anchor_set_for(images, words, alternates, seen)

    def _write(name, matrix, domain):
        fs = dataio.FeatureSet(
            matrix.astype(np.float32),
            np.arange(len(seen)),
            [domain] * len(seen),
            anchor_set.class_names,
        )
        dataio.write_fvec(fs, out / name)

    _write("visual_means.fvec", anchor_set.visual_means, "image")
    _write("visual_stds.fvec", anchor_set.visual_stds, "image")
    _write("anchor_words.fvec", anchor_set.word_vectors, "word")
    alt = anchor_set.word_alternates
    alt_fs = dataio.FeatureSet(
        alt.reshape(-1, alt.shape[2]).astype(np.float32),
        np.repeat(np.arange(len(seen)), alt.shape[1]),
        ["word"] * (len(seen) * alt.shape[1]),
        anchor_set.class_names,
    )
    dataio.write_fvec(alt_fs, out / "anchor_word_alternates.fvec")
    for name, sim in (("sim_word.csv", anchor_set.sim_word),
                      ("sim_visual.csv", anchor_set.sim_visual)):
        with open(out / name, "w", newline="") as fh:
            csv.writer(fh).writerows(sim.tolist())
    (out / "anchors.json").write_text(json.dumps(
        {"class_ids": anchor_set.class_ids, "class_names": anchor_set.class_names},
        indent=2,
    ))
    print(f"wrote anchors for {len(seen)} seen classes to {out}")
    return 0


def _run_training(args, config, images, sketches, split):
    data = trainer.assemble_training_data(
        images, sketches, split, config.val_per_class,
        np.random.default_rng(config.seed),
    )
    anchor_set = None
    if config.spec.use_word or config.spec.use_visual:
        words, alternates = _load_anchor_inputs(args)
        anchor_set = _anchor_set_for(images, words, alternates, data.seen_classes)
    return trainer.train(data, anchor_set, config)


def _test_report(result, images, sketches, split, ks=(100, 200)):
    queries = _encoded_feature_set(
        sketches.restrict_classes(split.unseen_classes), result.params
    )
    gallery_fs = _encoded_feature_set(
        images.restrict_classes(split.unseen_classes), result.params
    )
    gallery = retrieval.Gallery.from_feature_set(gallery_fs)
    return retrieval.evaluate(queries, gallery, ks=ks)


def cmd_train(args) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    _write_run_manifest(out, "train", config,
                        ["checkpoint/", "curve.csv", "loss_terms.csv"])
    images, sketches, split = _load_dataset(args)
    result = _run_training(args, config, images, sketches, split)
    trainer.save_checkpoint(result.params, out / "checkpoint")
    result.write_curve_csv(out / "curve.csv")
    result.write_term_log_csv(out / "loss_terms.csv")
    print(f"trained {config.iterations} iterations "
          f"(ablation {config.ablation}); final val mAP {result.final_val_map:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    params = trainer.load_checkpoint(args.checkpoint)
    images, sketches, split = _load_dataset(args)
    ks = [int(k) for k in args.ks.split(",")]
    queries = _encoded_feature_set(sketches.restrict_classes(split.unseen_classes), params)
    gallery = retrieval.Gallery.from_feature_set(
        _encoded_feature_set(images.restrict_classes(split.unseen_classes), params)
    )
    report = retrieval.evaluate(queries, gallery, ks=ks)
    report.to_csv(out / "report.csv", per_query=args.per_query)
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    base_config = _train_config(args)
    _write_run_manifest(out, "ablate", base_config, ["ablation.csv"])
    images, sketches, split = _load_dataset(args)
    rows = []
    for name in ("base", "a1", "a2", "b1", "b2", "ours"):
        config = _train_config(args, ablation=name)
        result = _run_training(args, config, images, sketches, split)
        report = _test_report(result, images, sketches, split)
        spec = trainer.ABLATIONS[name]
        rows.append({
            "id": name,
            "visual_anchors": int(spec.use_visual),
            "word_anchors": int(spec.use_word),
            "anchored_losses": int(len(spec.terms) > 1),
            "randomized": int(spec.randomize),
            "gcn": int(spec.gcn),
            "map": f"{report.map:.6f}",
            "p_at_100": f"{report.p_at_k[100]:.6f}",
        })
        print(f"{name:>5}: mAP {report.map:.4f}  P@100 {report.p_at_k[100]:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_select_images(args) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    _write_run_manifest(out, "select-images", config, ["selection_sweep.csv"])
    images, sketches, split = _load_dataset(args)
    words, alternates = _load_anchor_inputs(args)
    n_values = [int(n) for n in args.n_list.split(",")]
    modes = args.modes.split(",")
    seen = sorted(split.seen_classes)
    full_anchor_set = _anchor_set_for(images.restrict_classes(seen), words, alternates, seen)

    rows = []
    for n in n_values:
        for mode in modes:
            selected = retrieval.select_images_by_anchor_distance(
                images.restrict_classes(seen), full_anchor_set, n, mode
            )
            unrestricted = images.restrict_classes(split.unseen_classes + split.val_classes)
            train_pool = dataio.FeatureSet(
                np.vstack([selected.vectors, unrestricted.vectors]),
                np.concatenate([selected.labels, unrestricted.labels]),
                np.concatenate([selected.domains, unrestricted.domains]),
                images.class_names,
            )
            result = _run_training(args, config, train_pool, sketches, split)
            report = _test_report(result, images, sketches, split)
            rows.append({"n": n, "mode": mode, "map": f"{report.map:.6f}",
                         "p_at_100": f"{report.p_at_k[100]:.6f}"})
            print(f"n={n:>4} {mode:>8}: mAP {report.map:.4f}")
    with open(out / "selection_sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n", "mode", "map", "p_at_100"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_lr_curve(args) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    path = out / "lr_curve.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr"])
        for it in range(config.iterations + 1):
            writer.writerow([it, f"{trainer.lr_at(it, config):.12g}"])
    print(f"wrote {path}")
    return 0


def cmd_gzss_eval(args) -> int:
    out = _out_dir(args)
    params = trainer.load_checkpoint(args.checkpoint)
    images, sketches, split = _load_dataset(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    queries = _encoded_feature_set(sketches.restrict_classes(split.unseen_classes), params)
    test_enc = _encoded_feature_set(images.restrict_classes(split.unseen_classes), params)
    train_enc = _encoded_feature_set(images.restrict_classes(split.seen_classes), params)
    gallery = retrieval.make_generalized_gallery(train_enc, test_enc, args.fraction, rng)
    report = retrieval.evaluate(queries, gallery, ks=[int(k) for k in args.ks.split(",")])
    report.to_csv(out / "gzss_report.csv", per_query=args.per_query)
    injected = int((gallery.source_tags == retrieval.TAG_INJECTED).sum())
    print(f"gallery: {len(gallery)} items ({injected} injected from seen classes)")
    print(report.table())
    return 0


def cmd_fvec_info(args) -> int:
    fs = dataio.read_fvec(args.path)
    domains = sorted(set(fs.domains.tolist()))
    print(f"valid fvec container: {args.path}")
    print(f"count={len(fs)} dim={fs.dim} classes={fs.num_classes} domains={domains}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchoralign",
        description="Cross-domain sketch-to-image retrieval experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic two-domain dataset")
    p.add_argument("--out", type=Path)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--domain-gap", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--word-dim", type=int, default=48)
    p.add_argument("--unseen", type=int, default=4)
    p.add_argument("--val-classes", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("compute-anchors", help="write anchor statistics for the seen classes")
    p.add_argument("--out", type=Path)
    _add_data_flags(p)
    p.set_defaults(func=cmd_compute_anchors)

    p = sub.add_parser("train", help="train one model and write checkpoint + curves")
    p.add_argument("--out", type=Path)
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot retrieval report for a checkpoint")
    p.add_argument("--out", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--ks", default="100,200")
    p.add_argument("--per-query", action="store_true")
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all six ablation rows")
    p.add_argument("--out", type=Path)
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("select-images", help="anchor-distance image-selection sweep")
    p.add_argument("--out", type=Path)
    p.add_argument("--n-list", default="200,100,50,10,5,1")
    p.add_argument("--modes", default="closest,farthest")
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_select_images)

    p = sub.add_parser("lr-curve", help="dump the learning-rate schedule")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_lr_curve)

    p = sub.add_parser("gzss-eval", help="evaluate on the generalized gallery")
    p.add_argument("--out", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--ks", default="100,200")
    p.add_argument("--per-query", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_data_flags(p)
    p.set_defaults(func=cmd_gzss_eval)

    p = sub.add_parser("fvec-info", help="validate and summarize an fvec container")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_fvec_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AnchorAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
