"""Unified anchor graph construction and the graph-convolution stack."""

import numpy as np
import pytest

from anchoralign.anchorgraph import (
    GcnParams,
    adapted_anchors_graph,
    build_unified_graph,
    gcn_forward,
    init_gcn_params,
    unified_graph_graph,
)
from anchoralign.errors import ContractError, DegenerateAnchorError
from anchoralign.gradcheck import grad_check
from anchoralign.tape import Tape


class TestBuildUnifiedGraph:
    def test_single_class_splits_weight_evenly(self):
        graph = build_unified_graph([[1.0, 0.0]], [[0.0, 1.0]])
        np.testing.assert_allclose(graph.adjacency, np.full((2, 2), 0.5), atol=1e-12)
        np.testing.assert_array_equal(graph.nodes, [[1.0, 0.0], [0.0, 1.0]])

    def test_two_orthonormal_classes_hand_softmax(self):
        # Per row: logit 1 to itself, 0 to the other same-modality anchor,
        # 1 to its cross-modal partner, excluded otherwise.
        graph = build_unified_graph(np.eye(2), np.eye(2))
        e = np.e
        expected_row0 = np.array([e, 1.0, e, 0.0]) / (2 * e + 1.0)
        np.testing.assert_allclose(graph.adjacency[0], expected_row0, atol=1e-12)
        np.testing.assert_allclose(graph.adjacency[2], expected_row0[[2, 3, 0, 1]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        graph = build_unified_graph(
            rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
        )
        np.testing.assert_allclose(graph.adjacency.sum(axis=1), 1.0, atol=1e-12)

    def test_non_matching_cross_edges_get_zero_weight(self):
        rng = np.random.default_rng(1)
        c = 4
        graph = build_unified_graph(
            rng.standard_normal((c, 6)), rng.standard_normal((c, 6))
        )
        cross = graph.adjacency[:c, c:]
        off_diag = cross[~np.eye(c, dtype=bool)]
        np.testing.assert_array_equal(off_diag, 0.0)
        assert np.all(np.diag(cross) > 0.0)

    def test_row_stochastic_under_randomized_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            graph = build_unified_graph(
                rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
            )
            np.testing.assert_allclose(graph.adjacency.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            build_unified_graph(np.eye(2), np.eye(3))

    def test_zero_anchor_row_rejected(self):
        with pytest.raises(DegenerateAnchorError):
            build_unified_graph([[0.0, 0.0]], [[1.0, 0.0]])


class TestGcnForward:
    def test_single_class_identity_weight_hand_value(self):
        graph = build_unified_graph([[1.0, 0.0]], [[0.0, 1.0]])
        params = GcnParams([np.eye(2)])
        word, visual = gcn_forward(graph, params)
        expected = np.full((1, 2), 1.0 / np.sqrt(2.0))
        np.testing.assert_allclose(word, expected, atol=1e-12)
        np.testing.assert_allclose(visual, expected, atol=1e-12)

    def test_zero_last_layer_raises_degenerate(self):
        rng = np.random.default_rng(3)
        graph = build_unified_graph(
            rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        )
        params = GcnParams([rng.standard_normal((4, 4)), np.zeros((4, 4))])
        with pytest.raises(DegenerateAnchorError):
            gcn_forward(graph, params)

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(4)
        c, d = 3, 5
        graph = build_unified_graph(
            rng.standard_normal((c, d)), rng.standard_normal((c, d))
        )
        params = init_gcn_params(rng, d, layers=3)

        h = graph.nodes.copy()
        for layer, w in enumerate(params.layer_weights):
            msg = np.zeros_like(h)
            for i in range(2 * c):          # naive A @ H @ W
                for j in range(2 * c):
                    msg[i] += graph.adjacency[i, j] * h[j]
            nxt = np.zeros_like(h)
            for i in range(2 * c):
                for k in range(d):
                    acc = 0.0
                    for m in range(d):
                        acc += msg[i, m] * w[m, k]
                    nxt[i, k] = acc
            h = np.maximum(nxt, 0.0) if layer + 1 < params.num_layers else nxt
        h = h / np.linalg.norm(h, axis=1, keepdims=True)

        word, visual = gcn_forward(graph, params)
        np.testing.assert_allclose(np.vstack([word, visual]), h, atol=1e-10)

    def test_output_rows_unit_norm(self):
        rng = np.random.default_rng(5)
        graph = build_unified_graph(
            rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        )
        word, visual = gcn_forward(graph, init_gcn_params(rng, 6))
        np.testing.assert_allclose(np.linalg.norm(word, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(visual, axis=1), 1.0, atol=1e-12)


class TestEquivariance:
    def test_class_permutation_permutes_adapted_anchors(self):
        rng = np.random.default_rng(6)
        c, d = 5, 4
        word = rng.standard_normal((c, d))
        visual = rng.standard_normal((c, d))
        params = init_gcn_params(rng, d, layers=2)
        perm = rng.permutation(c)

        base_w, base_v = gcn_forward(build_unified_graph(word, visual), params)
        perm_w, perm_v = gcn_forward(
            build_unified_graph(word[perm], visual[perm]), params
        )
        np.testing.assert_allclose(perm_w, base_w[perm], atol=1e-10)
        np.testing.assert_allclose(perm_v, base_v[perm], atol=1e-10)


class TestGradients:
    def _composite_tape(self, dtype):
        rng = np.random.default_rng(7)
        c, d = 3, 4
        t = Tape(dtype)
        word = t.input("word", c, d)
        visual = t.input("visual", c, d)
        weights = [t.input(f"w{i}", d, d) for i in range(2)]
        aw, av = adapted_anchors_graph(t, word, visual, weights)
        r = t.row_normalize(t.input("r", 2, d))
        logits = t.smul(t.matmul(r, t.transpose(aw)), 1.0 / 0.2)
        t.smul(t.sum(t.mul(t.log(t.row_softmax(logits)), t.constant(np.ones((2, c))))), -0.5)
        binds = {
            "word": rng.standard_normal((c, d)),
            "visual": rng.standard_normal((c, d)),
            "w0": rng.standard_normal((d, d)),
            "w1": rng.standard_normal((d, d)),
            "r": rng.standard_normal((2, d)),
        }
        return t, binds

    def test_loss_through_adaptation_passes_grad_check(self):
        t, binds = self._composite_tape(np.float64)
        report = grad_check(t, binds, tolerance=1e-6)
        assert report.passed, str(report)

    def test_single_precision_within_1e4(self):
        t, binds = self._composite_tape(np.float32)
        report = grad_check(t, binds, tolerance=1e-4)
        assert report.passed, str(report)


class TestGraphBuilderOnTape:
    def test_tape_and_value_paths_agree(self):
        rng = np.random.default_rng(8)
        c, d = 4, 5
        word = rng.standard_normal((c, d))
        visual = rng.standard_normal((c, d))
        t = Tape()
        wv = t.input("w", c, d)
        vv = t.input("v", c, d)
        nodes, adjacency = unified_graph_graph(t, wv, vv)
        t.forward({"w": word, "v": visual})
        graph = build_unified_graph(word, visual)
        np.testing.assert_allclose(t.value(adjacency), graph.adjacency, atol=1e-15)
        np.testing.assert_allclose(t.value(nodes), graph.nodes, atol=1e-15)

    def test_layer_count_lower_bound(self):
        with pytest.raises(ContractError):
            init_gcn_params(np.random.default_rng(0), 4, layers=0)
