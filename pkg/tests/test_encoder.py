"""Encoder: gated projections, attention aggregation, and the full path."""

import numpy as np
import pytest

from anchoralign.encoder import (
    ArchConfig,
    attention_aggregate,
    encode,
    encode_batch,
    encode_graph,
    gated_projection,
    init_encoder_params,
    _ENCODER_TENSORS,
)
from anchoralign.errors import ContractError
from anchoralign.gradcheck import grad_check
from anchoralign.tape import Tape

ARCH = ArchConfig(input_dim=6, trunk_hidden=8, trunk_dim=5, proj_dim=7, attn_dim=4)


@pytest.fixture
def tensors():
    return init_encoder_params(np.random.default_rng(0), ARCH)


def loss_tape(arch, grad_scale, dtype=np.float64):
    """Scalar head over the full encode path, for gradient tests."""
    t = Tape(dtype)
    p = {}
    probe = init_encoder_params(np.random.default_rng(0), arch)
    for name in _ENCODER_TENSORS:
        p[name] = t.input(name, *probe[name].shape)
    x = t.input("x", 3, arch.input_dim)
    r_word, r_visual, r_final = encode_graph(t, x, p, arch, grad_scale)
    # Weighted sums against fixed random matrices: outputs are unit rows, so
    # a plain sum of squares would be constant and its gradient degenerate.
    probe_rng = np.random.default_rng(99)
    heads = t.sum(
        t.mul(t.vstack(r_word, r_visual),
              t.constant(probe_rng.standard_normal((6, arch.proj_dim))))
    )
    final = t.sum(
        t.mul(r_final, t.constant(probe_rng.standard_normal((3, arch.trunk_dim))))
    )
    t.add(heads, final)
    return t, probe


class TestGatedProjection:
    def test_zero_gate_params_halve_the_linear_map(self, tensors):
        tensors = dict(tensors)
        tensors["proj_word.W2"] = np.zeros_like(tensors["proj_word.W2"])
        tensors["proj_word.b2"] = np.zeros_like(tensors["proj_word.b2"])
        h = np.random.default_rng(1).standard_normal(ARCH.trunk_dim)
        out = gated_projection(h, tensors, "proj_word")
        pre = h @ tensors["proj_word.W1"] + tensors["proj_word.b1"][0]
        expected = 0.5 * pre
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_output_is_unit_norm(self, tensors):
        rng = np.random.default_rng(2)
        for _ in range(10):
            out = gated_projection(rng.standard_normal(ARCH.trunk_dim), tensors)
            assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        t = Tape()
        probe = init_encoder_params(rng, ARCH)
        names = [f"proj_word.{s}" for s in ("W1", "b1", "W2", "b2")]
        p = {n: t.input(n, *probe[n].shape) for n in names}
        x = t.input("x", 2, ARCH.trunk_dim)
        from anchoralign.encoder import gated_projection_graph

        out = gated_projection_graph(t, x, p, "proj_word")
        t.sum(t.mul(out, t.constant(rng.standard_normal((2, ARCH.proj_dim)))))
        binds = {n: probe[n] for n in names}
        binds["x"] = rng.standard_normal((2, ARCH.trunk_dim))
        report = grad_check(t, binds, tolerance=1e-4)
        assert report.passed, str(report)


class TestAttentionAggregate:
    def test_identical_tokens_split_evenly(self, tensors):
        h = np.random.default_rng(4).standard_normal(ARCH.trunk_dim)
        out, alpha = attention_aggregate(h, h, tensors)
        np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(out, h / np.linalg.norm(h), atol=1e-12)

    def test_zero_score_vector_gives_even_weights(self, tensors):
        tensors = dict(tensors)
        tensors["agg.q"] = np.zeros_like(tensors["agg.q"])
        rng = np.random.default_rng(5)
        _, alpha = attention_aggregate(
            rng.standard_normal(ARCH.trunk_dim), rng.standard_normal(ARCH.trunk_dim), tensors
        )
        np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-12)

    def test_swapping_inputs_swaps_weights(self, tensors):
        rng = np.random.default_rng(6)
        hw = rng.standard_normal(ARCH.trunk_dim)
        hv = rng.standard_normal(ARCH.trunk_dim)
        _, alpha = attention_aggregate(hw, hv, tensors)
        _, swapped = attention_aggregate(hv, hw, tensors)
        np.testing.assert_allclose(alpha, swapped[::-1], atol=1e-12)


class TestEncode:
    def test_all_outputs_unit_norm(self, tensors):
        rng = np.random.default_rng(7)
        rep = encode(rng.standard_normal(ARCH.input_dim), tensors, ARCH)
        for vec in (rep.r_word, rep.r_visual, rep.r_final):
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)

    def test_domain_tag_is_metadata_only(self, tensors):
        x = np.random.default_rng(8).standard_normal(ARCH.input_dim)
        a = encode(x, tensors, ARCH, domain="sketch")
        b = encode(x, tensors, ARCH, domain="image")
        np.testing.assert_array_equal(a.r_final, b.r_final)
        assert (a.domain, b.domain) == ("sketch", "image")

    def test_deterministic(self, tensors):
        x = np.random.default_rng(9).standard_normal((4, ARCH.input_dim))
        a = encode_batch(x, tensors, ARCH)
        b = encode_batch(x, tensors, ARCH)
        for m1, m2 in zip(a, b):
            np.testing.assert_array_equal(m1, m2)

    def test_input_dim_checked(self, tensors):
        with pytest.raises(ContractError):
            encode_batch(np.zeros((2, ARCH.input_dim + 1)), tensors, ARCH)

    def test_zero_grad_scale_freezes_trunk_only(self):
        t, probe = loss_tape(ARCH, grad_scale=0.0)
        rng = np.random.default_rng(10)
        binds = dict(probe)
        binds["x"] = rng.standard_normal((3, ARCH.input_dim))
        t.forward(binds)
        grads = t.backward()
        for name in ("trunk.W1", "trunk.b1", "trunk.W2", "trunk.b2"):
            np.testing.assert_array_equal(grads[name], 0.0)
        assert np.abs(grads["proj_word.W1"]).max() > 0.0
        assert np.abs(grads["agg.Wa"]).max() > 0.0

    def test_grad_scale_rescales_trunk_gradients_exactly(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, ARCH.input_dim))
        grads = {}
        for scale in (1.0, 0.1):
            t, probe = loss_tape(ARCH, grad_scale=scale)
            binds = dict(probe)
            binds["x"] = x
            t.forward(binds)
            grads[scale] = t.backward()
        for name in ("trunk.W1", "trunk.W2"):
            np.testing.assert_allclose(
                grads[1.0][name], 10.0 * grads[0.1][name], rtol=1e-12
            )
        np.testing.assert_array_equal(
            grads[1.0]["proj_visual.W1"], grads[0.1]["proj_visual.W1"]
        )

    def test_full_pipeline_grad_check(self):
        # Checked at grad scale 1.0: the trunk scale node deliberately makes
        # the backward pass differ from the true derivative otherwise.
        for dtype, tol in ((np.float64, 1e-6), (np.float32, 1e-4)):
            t, probe = loss_tape(ARCH, grad_scale=1.0, dtype=dtype)
            rng = np.random.default_rng(12)
            binds = dict(probe)
            binds["x"] = rng.standard_normal((3, ARCH.input_dim))
            report = grad_check(t, binds, tolerance=tol, samples_per_param=6)
            assert report.passed, f"{dtype}: {report}"
