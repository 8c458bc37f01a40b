"""Schedule, Adam, batch sampling, training-loop behavior, checkpoints."""

import math

import numpy as np
import pytest

from anchoralign import dataio, trainer
from anchoralign.anchors import build_anchor_set
from anchoralign.errors import ConfigError, ContractError, DataError, TrainingDivergedError
from anchoralign.losses import TERM_NAMES


def paper_schedule():
    return trainer.TrainConfig(
        iterations=1500, warmup_iters=150, base_lr=5e-6, min_lr=1e-6
    )


@pytest.fixture(scope="module")
def tiny_task():
    """Small synthetic task shared by the loop tests."""
    rng = np.random.default_rng(0)
    data = dataio.generate_synthetic(6, 20, 8, 0.5, 0.25, rng, word_dim=10)
    split = dataio.make_zero_shot_split(6, 2, rng)
    td = trainer.assemble_training_data(
        data.images, data.sketches, split, val_per_class=10,
        rng=np.random.default_rng(0),
    )
    seen = td.seen_classes
    anchor_set = build_anchor_set(
        data.images, data.word_vectors[seen], data.word_alternates[seen], seen
    )
    return td, anchor_set


def tiny_config(**kw):
    defaults = dict(
        iterations=12, warmup_iters=3, eval_every=6, batch_size=4,
        trunk_hidden=8, trunk_dim=8, proj_dim=16, attn_dim=8, gcn_layers=2,
        base_lr=1e-3, seed=0,
    )
    defaults.update(kw)
    return trainer.TrainConfig(**defaults)


class TestLrSchedule:
    def test_reaches_base_lr_at_warmup_end(self):
        config = paper_schedule()
        assert trainer.lr_at(150, config) == pytest.approx(5e-6, abs=1e-18)

    def test_reaches_min_lr_at_final_iteration(self):
        config = paper_schedule()
        assert trainer.lr_at(1500, config) == pytest.approx(1e-6, abs=1e-18)

    def test_cosine_midpoint(self):
        config = paper_schedule()
        assert trainer.lr_at(825, config) == pytest.approx(3e-6, abs=1e-18)

    def test_continuous_at_warmup_boundary(self):
        config = paper_schedule()
        left = trainer.lr_at(149, config)
        right = trainer.lr_at(150, config)
        assert abs(left - right) < 1e-12

    def test_monotone_nonincreasing_after_warmup(self):
        config = paper_schedule()
        lrs = [trainer.lr_at(i, config) for i in range(150, 1501)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_warmup_is_linear_and_nonzero_at_start(self):
        config = paper_schedule()
        assert trainer.lr_at(0, config) == pytest.approx(5e-6 / 150)
        steps = [trainer.lr_at(i, config) for i in range(150)]
        diffs = np.diff(steps)
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-20)

    def test_min_lr_defaults_to_fifth_of_base(self):
        config = trainer.TrainConfig(base_lr=5e-6)
        assert config.min_lr == pytest.approx(1e-6)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            trainer.TrainConfig(warmup_iters=2000, iterations=1500)
        with pytest.raises(ConfigError):
            trainer.TrainConfig(min_lr=1.0, base_lr=0.1)
        with pytest.raises(ConfigError):
            trainer.TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            trainer.TrainConfig(ablation="a3")


class TestAdam:
    def test_first_step_is_signed_lr(self):
        tensors = {"w": np.zeros((2, 2))}
        g = np.array([[0.5, -3.0], [1e-3, 0.0]])
        state = trainer.AdamState.for_params(tensors)
        trainer.adam_step(tensors, {"w": g}, state, lr=0.1)
        # Bias correction makes mhat = g and vhat = g^2 on the first step,
        # so each nonzero entry moves by about -lr * sign(g).
        expected = np.where(g != 0.0, -0.1 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8), 0.0)
        np.testing.assert_allclose(tensors["w"], expected, rtol=1e-6)

    def test_zero_gradient_leaves_params_bitwise_unchanged(self):
        rng = np.random.default_rng(0)
        tensors = {"w": rng.standard_normal((3, 3))}
        original = tensors["w"].copy()
        state = trainer.AdamState.for_params(tensors)
        for _ in range(50):
            trainer.adam_step(tensors, {"w": np.zeros((3, 3))}, state, lr=0.1)
        np.testing.assert_array_equal(tensors["w"], original)

    def test_matches_naive_scalar_loop_over_100_steps(self):
        rng = np.random.default_rng(1)
        shape = (4, 3)
        tensors = {"w": rng.standard_normal(shape)}
        naive = tensors["w"].copy()
        m = np.zeros(shape)
        v = np.zeros(shape)
        state = trainer.AdamState.for_params(tensors)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 3e-3

        for step in range(1, 101):
            g = rng.standard_normal(shape)
            trainer.adam_step(tensors, {"w": g.copy()}, state, lr)
            for i in range(shape[0]):
                for j in range(shape[1]):
                    m[i, j] = b1 * m[i, j] + (1 - b1) * g[i, j]
                    v[i, j] = b2 * v[i, j] + (1 - b2) * g[i, j] ** 2
                    mhat = m[i, j] / (1 - b1**step)
                    vhat = v[i, j] / (1 - b2**step)
                    naive[i, j] -= lr * mhat / (math.sqrt(vhat) + eps)
        np.testing.assert_allclose(tensors["w"], naive, atol=1e-12)


class TestSampleBatch:
    def _sets(self, classes=4, per_class=6, dim=5, seed=0):
        rng = np.random.default_rng(seed)
        data = dataio.generate_synthetic(classes, per_class, dim, 0.5, 0.2, rng)
        return data.sketches, data.images

    def test_single_class_gives_constant_gamma(self):
        sketches, images = self._sets()
        batch = trainer.sample_batch(sketches, images, [2], 8, np.random.default_rng(0))
        np.testing.assert_array_equal(batch.class_ids, np.zeros(8, dtype=np.int64))

    def test_class_frequencies_uniform(self):
        sketches, images = self._sets()
        rng = np.random.default_rng(1)
        counts = np.zeros(4)
        draws = 10_000 // 4
        for _ in range(draws):
            batch = trainer.sample_batch(sketches, images, [0, 1, 2, 3], 4, rng)
            for g in batch.class_ids:
                counts[g] += 1
        freqs = counts / (draws * 4)
        assert np.all(np.abs(freqs - 0.25) <= 0.02)

    def test_pairs_share_class(self):
        sketches, images = self._sets()
        rng = np.random.default_rng(2)
        batch = trainer.sample_batch(sketches, images, [1, 3], 16, rng)
        seen_classes = [1, 3]
        for i in range(16):
            cid = seen_classes[batch.class_ids[i]]
            assert np.any(np.all(sketches.vectors[sketches.labels == cid] == batch.sketches[i].astype(np.float32), axis=1))
            assert np.any(np.all(images.vectors[images.labels == cid] == batch.images[i].astype(np.float32), axis=1))

    def test_fixed_seed_reproduces_sequence(self):
        sketches, images = self._sets()
        a = [trainer.sample_batch(sketches, images, [0, 1], 4, np.random.default_rng(5)) for _ in range(1)]
        b = [trainer.sample_batch(sketches, images, [0, 1], 4, np.random.default_rng(5)) for _ in range(1)]
        np.testing.assert_array_equal(a[0].sketches, b[0].sketches)
        np.testing.assert_array_equal(a[0].class_ids, b[0].class_ids)

    def test_empty_class_rejected(self):
        sketches, images = self._sets()
        no_sketches = sketches.restrict_classes([0])
        with pytest.raises(DataError):
            trainer.sample_batch(no_sketches, images, [0, 1], 4, np.random.default_rng(0))


class TestTrainLoop:
    def test_zero_iterations_returns_initial_params(self, tiny_task):
        td, anchor_set = tiny_task
        config = tiny_config(iterations=0, warmup_iters=0)
        result = trainer.train(td, anchor_set, config)
        fresh = trainer.init_model_params(
            np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]),
            result.params.arch,
        )
        for name, tensor in result.params.tensors.items():
            np.testing.assert_array_equal(tensor, fresh.tensors[name])
        assert len(result.val_points) == 1
        assert result.final_val_map == result.val_points[0][1]

    def test_same_seed_identical_curves(self, tiny_task):
        td, anchor_set = tiny_task
        a = trainer.train(td, anchor_set, tiny_config(ablation="ours"))
        b = trainer.train(td, anchor_set, tiny_config(ablation="ours"))
        assert len(a.curve) == len(b.curve)
        for pa, pb in zip(a.curve, b.curve):
            assert abs(pa.total - pb.total) < 1e-9
            for name in TERM_NAMES:
                assert abs(pa.terms[name] - pb.terms[name]) < 1e-9
            if pa.val_map is not None:
                assert abs(pa.val_map - pb.val_map) < 1e-9

    def test_zero_backbone_scale_freezes_trunk_bitwise(self, tiny_task):
        td, anchor_set = tiny_task
        config = tiny_config(backbone_grad_scale=0.0)
        result = trainer.train(td, None if False else anchor_set, config)
        fresh = trainer.init_model_params(
            np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]),
            result.params.arch,
        )
        for name in ("trunk.W1", "trunk.b1", "trunk.W2", "trunk.b2"):
            np.testing.assert_array_equal(result.params.tensors[name], fresh.tensors[name])
        assert not np.array_equal(
            result.params.tensors["proj_word.W1"], fresh.tensors["proj_word.W1"]
        )

    def test_base_ablation_needs_no_anchor_set(self, tiny_task):
        td, _ = tiny_task
        result = trainer.train(td, None, tiny_config(ablation="base"))
        assert result.final_val_map >= 0.0
        point = result.curve[1]
        assert point.terms["base"] > 0.0
        assert point.terms["sem_word_sketch"] == 0.0

    def test_anchor_ablations_require_anchor_set(self, tiny_task):
        td, _ = tiny_task
        with pytest.raises(ContractError):
            trainer.train(td, None, tiny_config(ablation="ours"))

    def test_disabling_terms_preserves_shared_term_values_at_iteration_0(self, tiny_task):
        td, anchor_set = tiny_task
        one_iter = dict(iterations=1, warmup_iters=0, eval_every=1)
        full = trainer.train(td, anchor_set, tiny_config(ablation="a2", **one_iter))
        reduced = trainer.train(td, anchor_set, tiny_config(ablation="a1", **one_iter))
        base_only = trainer.train(td, None, tiny_config(ablation="base", **one_iter))
        f, r, b = full.curve[1], reduced.curve[1], base_only.curve[1]
        assert f.terms["base"] == pytest.approx(b.terms["base"], abs=1e-12)
        assert f.terms["base"] == pytest.approx(r.terms["base"], abs=1e-12)
        for term in ("sem_visual_sketch", "sem_visual_image", "sample_visual"):
            assert f.terms[term] == pytest.approx(r.terms[term], abs=1e-12)

    def test_ablation_flag_mapping(self):
        assert trainer.ABLATIONS["base"].terms == ("base",)
        a1 = trainer.ABLATIONS["a1"]
        assert set(a1.terms) == {"base", "sem_visual_sketch", "sem_visual_image", "sample_visual"}
        assert not a1.use_word and a1.use_visual
        a2 = trainer.ABLATIONS["a2"]
        assert set(a2.terms) == set(TERM_NAMES)
        b1, b2 = trainer.ABLATIONS["b1"], trainer.ABLATIONS["b2"]
        assert b1.randomize and not b1.gcn
        assert b2.gcn and not b2.randomize
        ours = trainer.ABLATIONS["ours"]
        assert ours.randomize and ours.gcn and set(ours.terms) == set(TERM_NAMES)

    def test_divergence_aborts_with_iteration_index(self, tiny_task, monkeypatch):
        td, anchor_set = tiny_task

        calls = {"n": 0}
        original = trainer._TrainGraph.run

        def poisoned(self, tensors, batch, n_seen, anchor_inputs):
            calls["n"] += 1
            if calls["n"] == 3:
                raise FloatingPointError("final node value is not finite")
            return original(self, tensors, batch, n_seen, anchor_inputs)

        monkeypatch.setattr(trainer._TrainGraph, "run", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            trainer.train(td, anchor_set, tiny_config())
        assert err.value.iteration == 2

    def test_loss_decreases_on_tiny_task(self, tiny_task):
        td, anchor_set = tiny_task
        config = tiny_config(iterations=300, warmup_iters=30, eval_every=100,
                             base_lr=3e-3, ablation="base")
        result = trainer.train(td, None, config)
        first10 = np.mean([p.total for p in result.curve[1:11]])
        last10 = np.mean([p.total for p in result.curve[-10:]])
        assert last10 < first10


class TestCheckpoint:
    def test_round_trip_at_f32_precision(self, tiny_task, tmp_path):
        td, anchor_set = tiny_task
        result = trainer.train(td, anchor_set, tiny_config())
        trainer.save_checkpoint(result.params, tmp_path / "ckpt")
        loaded = trainer.load_checkpoint(tmp_path / "ckpt")
        assert loaded.arch == result.params.arch
        assert set(loaded.tensors) == set(result.params.tensors)
        for name, tensor in result.params.tensors.items():
            np.testing.assert_array_equal(
                loaded.tensors[name], tensor.astype(np.float32).astype(np.float64)
            )

    def test_curve_csv_layout(self, tiny_task, tmp_path):
        td, anchor_set = tiny_task
        result = trainer.train(td, anchor_set, tiny_config())
        path = tmp_path / "curve.csv"
        result.write_curve_csv(path)
        import csv

        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["iteration", "lr", "total_loss"]
        assert rows[0][-1] == "val_map"
        assert len(rows) == 1 + len(result.curve)
        # iteration-0 row records the untrained validation score
        assert rows[1][0] == "0" and rows[1][-1] != ""

    def test_term_log_long_format(self, tiny_task, tmp_path):
        td, anchor_set = tiny_task
        result = trainer.train(td, anchor_set, tiny_config(iterations=3, warmup_iters=1, eval_every=3))
        path = tmp_path / "terms.csv"
        result.write_term_log_csv(path)
        import csv

        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "term", "value"]
        assert len(rows) == 1 + len(result.curve) * len(TERM_NAMES)
