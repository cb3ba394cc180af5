import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xladapt import numerics
from xladapt.numerics import (
    Rng,
    affine_backward,
    affine_forward,
    backward_chain,
    relu,
    relu_backward,
    softmax,
    softmax_xent,
)

from conftest import central_diff, max_rel_err, triple_loop_affine


class TestAffine:
    def test_identity(self):
        out = affine_forward(np.eye(2), np.eye(2), np.zeros(2))
        assert np.array_equal(out, np.eye(2))

    def test_bias_addition(self):
        out = affine_forward(np.array([[1.0, 2.0]]), np.eye(2), np.array([3.0, 4.0]))
        assert np.array_equal(out, np.array([[4.0, 6.0]]))

    def test_matches_triple_loop_oracle_exactly(self, np_rng):
        x = np_rng.standard_normal((3, 4))
        w = np_rng.standard_normal((4, 5))
        b = np_rng.standard_normal(5)
        assert np.array_equal(affine_forward(x, w, b), triple_loop_affine(x, w, b))

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_agreement_many_shapes(self, seed):
        r = np.random.default_rng(seed)
        n, k, m = r.integers(1, 12, 3)
        x = r.standard_normal((n, k)) * 10.0 ** r.integers(-2, 3)
        w = r.standard_normal((k, m))
        b = r.standard_normal(m)
        assert np.array_equal(affine_forward(x, w, b), triple_loop_affine(x, w, b))

    def test_numpy_fallback_matches_numba_path(self, np_rng):
        x = np_rng.standard_normal((6, 9))
        w = np_rng.standard_normal((9, 4))
        b = np_rng.standard_normal(4)
        assert np.array_equal(
            numerics._affine_fwd_np(x, w, b), triple_loop_affine(x, w, b)
        )

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            affine_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))

    def test_backward_matches_finite_differences(self, np_rng):
        x = np_rng.standard_normal((4, 3))
        w = np_rng.standard_normal((3, 5))
        b = np_rng.standard_normal(5)
        dout = np_rng.standard_normal((4, 5))
        dw, db, dx = affine_backward(x, w, dout)

        def loss():
            return float((affine_forward(x, w, b) * dout).sum())

        assert max_rel_err(dw, central_diff(loss, w)) < 1e-4
        assert max_rel_err(db, central_diff(loss, b)) < 1e-4
        assert max_rel_err(dx, central_diff(loss, x)) < 1e-4


class TestRelu:
    def test_sign_cases(self):
        assert np.array_equal(relu(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])

    def test_identity_on_positives(self, np_rng):
        x = np.abs(np_rng.standard_normal((3, 4))) + 0.1
        assert np.array_equal(relu(x), x)

    def test_gradient_mask_is_positive_indicator(self, np_rng):
        # keep entries away from the kink so central differences are clean
        x = np_rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        dout = np_rng.standard_normal((3, 4))

        def loss():
            return float((relu(x) * dout).sum())

        fd = central_diff(loss, x, h=1e-6)
        assert max_rel_err(relu_backward(x, dout), fd) < 1e-4
        assert np.array_equal(relu_backward(x, np.ones_like(x)) != 0, x > 0)


class TestSoftmaxXent:
    def test_uniform_logits_gives_log_c(self):
        loss, _ = softmax_xent(np.zeros((3, 4)), np.array([0, 1, 2]))
        assert loss == pytest.approx(math.log(4.0), rel=1e-12)
        assert loss == pytest.approx(1.3862943611198906, rel=1e-12)

    def test_saturated_case(self):
        loss, dlogits = softmax_xent(np.array([[10.0, -10.0]]), np.array([0]))
        assert abs(loss) < 1e-4
        assert np.max(np.abs(dlogits)) < 1e-4

    def test_gradient_matches_finite_differences(self, np_rng):
        logits = np_rng.standard_normal((5, 7))
        labels = np_rng.integers(0, 7, 5)

        def loss():
            return softmax_xent(logits, labels)[0]

        _, dlogits = softmax_xent(logits, labels)
        assert max_rel_err(dlogits, central_diff(loss, logits)) < 1e-6

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="label out of range"):
            softmax_xent(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(ValueError, match="label out of range"):
            softmax_xent(np.zeros((2, 3)), np.array([-1, 0]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        logits = r.standard_normal((4, 6)) * 10.0 ** r.integers(-2, 3)
        p = softmax(logits)
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all((p >= 0.0) & (p <= 1.0))


class TestBackwardChain:
    def test_single_linear_layer_closed_form(self, np_rng):
        # One affine + cross-entropy: dW = x^T (softmax - onehot)/n, db likewise.
        x = np_rng.standard_normal((6, 3))
        w = np_rng.standard_normal((3, 4))
        b = np_rng.standard_normal(4)
        labels = np_rng.integers(0, 4, 6)
        logits = affine_forward(x, w, b)
        _, dlogits = softmax_xent(logits, labels)
        cache = numerics.LayerCache("out", w, x, None, None, [(0, 6)])
        grads = backward_chain([cache], dlogits)
        probs = softmax(logits)
        onehot = np.zeros_like(probs)
        onehot[np.arange(6), labels] = 1.0
        expected_dw = x.T @ ((probs - onehot) / 6)
        expected_db = ((probs - onehot) / 6).sum(axis=0)
        assert np.allclose(grads["out"][0], expected_dw, atol=1e-12)
        assert np.allclose(grads["out"][1], expected_db, atol=1e-12)

    def test_zero_dlogits_gives_zero_grads(self, np_rng):
        x = np_rng.standard_normal((5, 3))
        w = np_rng.standard_normal((3, 4))
        cache = numerics.LayerCache("out", w, x, None, None, [(0, 5)])
        grads = backward_chain([cache], np.zeros((5, 4)))
        assert np.all(grads["out"][0] == 0.0)
        assert np.all(grads["out"][1] == 0.0)

    def test_cache_stack_mismatch_rejected(self, np_rng):
        x = np_rng.standard_normal((5, 3))
        w = np_rng.standard_normal((3, 4))
        cache = numerics.LayerCache("out", w, x, None, None, [(0, 5)])
        with pytest.raises(ValueError, match="mismatch"):
            backward_chain([cache], np.zeros((4, 4)))
        with pytest.raises(ValueError, match="empty"):
            backward_chain([], np.zeros((4, 4)))


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(42).normal((8,))
        b = Rng(42).normal((8,))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal((8,)), Rng(2).normal((8,)))

    def test_substreams_stable_under_new_consumers(self):
        root = Rng(7)
        before = root.split("weights").normal((4,))
        root2 = Rng(7)
        root2.split("extra-consumer").normal((100,))
        after = root2.split("weights").normal((4,))
        assert np.array_equal(before, after)

    def test_nested_labels_are_independent(self):
        a = Rng(7).split("x").split("y").normal((4,))
        b = Rng(7).split("x").split("z").normal((4,))
        assert not np.array_equal(a, b)

    def test_markov_path_respects_transition_support(self):
        trans = np.array([[0.0, 1.0], [1.0, 0.0]])
        path = Rng(3).markov_path(trans, np.array([1.0, 0.0]), 10)
        assert np.array_equal(path, np.arange(10) % 2)
