"""Benchmark: compiled kernels vs the numpy fallback.

Times the individual hot kernels at training-relevant shapes, one full
training iteration (forward + backward + Adam), and the Adam update alone.

Usage: python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from anchoralign import _kernels
from anchoralign import dataio, trainer
from anchoralign.anchors import build_anchor_set


def best_of(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    shapes = {
        "batch-logits (16x512)": (16, 512),
        "adjacency (24x24)": (24, 24),
        "gcn-nodes (24x512)": (24, 512),
        "eval-batch (512x512)": (512, 512),
    }
    rows = []
    for label, shape in shapes.items():
        x = rng.standard_normal(shape)
        gy = rng.standard_normal(shape)
        for kernel in ("row_softmax", "sigmoid", "tanh", "row_normalize"):
            times = {}
            for backend in _kernels.available_backends():
                _kernels.set_backend(backend)
                fn = getattr(_kernels, kernel)
                times[backend] = best_of(lambda: fn(x), repeats)
            rows.append((f"{kernel:<14} {label}", times))
        # one representative backward kernel
        y = _kernels.row_softmax(x)
        times = {}
        for backend in _kernels.available_backends():
            _kernels.set_backend(backend)
            acc = np.zeros_like(x)
            times[backend] = best_of(lambda: _kernels.row_softmax_bwd(y, gy, acc), repeats)
        rows.append((f"{'softmax-bwd':<14} {label}", times))
    return rows


def bench_adam(repeats):
    rng = np.random.default_rng(1)
    rows = []
    for n in (512 * 512, 2_000_000):
        p = rng.standard_normal(n)
        g = rng.standard_normal(n)
        m = np.zeros(n)
        v = np.zeros(n)
        times = {}
        for backend in _kernels.available_backends():
            _kernels.set_backend(backend)
            times[backend] = best_of(
                lambda: _kernels.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
                max(repeats // 10, 5),
            )
        rows.append((f"adam-update    n={n}", times))
    return rows


def bench_iteration(repeats):
    rng = np.random.default_rng(2)
    data = dataio.generate_synthetic(12, 50, 32, 0.6, 0.25, rng)
    split = dataio.make_zero_shot_split(12, 4, rng)
    td = trainer.assemble_training_data(data.images, data.sketches, split, 16,
                                        np.random.default_rng(0))
    seen = td.seen_classes
    aset = build_anchor_set(data.images, data.word_vectors[seen],
                            data.word_alternates[seen], seen)
    times = {}
    for backend in _kernels.available_backends():
        _kernels.set_backend(backend)
        config = trainer.TrainConfig(iterations=repeats, warmup_iters=1,
                                     eval_every=10 * repeats, seed=0, ablation="ours")
        t0 = time.perf_counter()
        trainer.train(td, aset, config)
        times[backend] = (time.perf_counter() - t0) / repeats
    return [("train-iteration (ours, defaults)", times)]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if "compiled" not in _kernels.available_backends():
        print("compiled backend not built; run pip install -e . first")

    original = _kernels.active_backend()
    try:
        rows = bench_kernels(args.repeats)
        rows += bench_adam(args.repeats)
        rows += bench_iteration(min(args.repeats, 60))
    finally:
        _kernels.set_backend(original)

    backends = _kernels.available_backends()
    header = f"{'kernel / stage':<42}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, times in rows:
        line = f"{label:<42}"
        for b in backends:
            line += f"{times[b] * 1e6:>10.1f}us"
        if len(backends) > 1 and "compiled" in times and "numpy" in times:
            line += f"{times['numpy'] / times['compiled']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
