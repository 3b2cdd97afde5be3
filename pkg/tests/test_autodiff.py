"""Tests for the tensor / autodiff / Adam layer."""

from __future__ import annotations

import math

import numpy as np
import pytest

from app.exceptions import AutodiffUsageError, DimensionError, NumericalError, TargetNormalizationError
from app.services import autodiff as ad
from app.services.autodiff import AdamState, Tensor


# ── Helpers ──

def _param(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _numeric_grad(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``tensor`` (mutated in place)."""
    grad = np.zeros_like(tensor.data)
    for idx in np.ndindex(tensor.shape):
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        plus = fn().item()
        tensor.data[idx] = original - h
        minus = fn().item()
        tensor.data[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _check_gradients(fn, params, tol: float = 1e-4) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
    ad.backward(fn())
    for p in params:
        numeric = _numeric_grad(fn, p)
        assert _relative_error(p.grad, numeric) < tol


def _softmax_oracle(row) -> np.ndarray:
    e = [math.exp(v) for v in row]
    s = sum(e)
    return np.array([v / s for v in e])


# ── Matmul ──

class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_projector(self):
        out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12, rtol=0)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a, b = _param(rng.normal(size=(3, 4))), _param(rng.normal(size=(4, 2)))
        _check_gradients(lambda: ad.total(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b])

    def test_batched_gradients(self):
        rng = np.random.default_rng(2)
        a, b = _param(rng.normal(size=(2, 3, 4))), _param(rng.normal(size=(4, 2)))
        _check_gradients(lambda: ad.total(ad.gelu(ad.matmul(a, b))), [a, b])


# ── Softmax ──

class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_shift_invariance(self):
        base = ad.softmax_rows(Tensor([[0.0, 1.7]])).data
        shifted = ad.softmax_rows(Tensor([[-3.2, -1.5]])).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)

    def test_matches_direct_evaluation(self):
        out = ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(out, _softmax_oracle([1.0, 2.0, 3.0]), atol=1e-12, rtol=0)

    def test_large_logits_stay_finite(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = _param(rng.normal(size=(2, 5)))
        w = Tensor(rng.normal(size=(2, 5)))
        _check_gradients(lambda: ad.total(ad.mul(ad.softmax_rows(x), w)), [x])


# ── Cross-entropy ──

class TestCrossEntropy:
    def test_uniform_entropy(self):
        loss = ad.cross_entropy_soft(Tensor([[0.0, 0.0]]), np.array([[0.5, 0.5]]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_match(self):
        loss = ad.cross_entropy_soft(Tensor([[60.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_hand_evaluated(self):
        p1 = math.exp(1) / (math.exp(1) + 1)
        expected = -(0.3 * math.log(p1) + 0.7 * math.log(1 - p1))
        loss = ad.cross_entropy_soft(Tensor([[1.0, 0.0]]), np.array([[0.3, 0.7]]))
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_unnormalized_target_rejected(self):
        with pytest.raises(TargetNormalizationError):
            ad.cross_entropy_soft(Tensor([[0.0, 0.0]]), np.array([[0.5, 0.6]]))

    def test_needs_two_classes(self):
        with pytest.raises(DimensionError):
            ad.cross_entropy_soft(Tensor([[0.0]]), np.array([[1.0]]))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        logits = _param(rng.normal(size=(3, 4)))
        target = rng.dirichlet(np.ones(4), size=3)
        _check_gradients(lambda: ad.cross_entropy_soft(logits, target), [logits])

    def test_probs_variant_gradients(self):
        rng = np.random.default_rng(5)
        x = _param(rng.normal(size=(2, 3, 4)))
        target = rng.dirichlet(np.ones(4), size=(2, 3))
        _check_gradients(lambda: ad.cross_entropy_probs(ad.softmax_rows(x), target), [x])


# ── Property suite ──

class TestProperties:
    def test_randomized_normalization_and_gibbs(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            rows, cols = rng.integers(1, 4), rng.integers(2, 7)
            logits = rng.normal(scale=2.0, size=(rows, cols))
            probs = ad.softmax_rows(Tensor(logits)).data
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
            assert np.all((probs > 0) & (probs < 1))

            target = rng.dirichlet(np.ones(cols), size=rows)
            entropy = -(target * np.log(target)).sum() / rows
            ce = ad.cross_entropy_soft(Tensor(logits), target).item()
            assert ce >= entropy - 1e-9
            at_target = ad.cross_entropy_soft(Tensor(np.log(target)), target).item()
            assert at_target == pytest.approx(entropy, abs=1e-6)


# ── Primitives ──

class TestPrimitiveGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_gelu(self):
        x = _param(self.rng.normal(size=(4, 3)))
        _check_gradients(lambda: ad.total(ad.gelu(x)), [x])

    def test_gelu_constants(self):
        x = 0.7
        expected = 0.5 * x * (1 + math.tanh(0.7978845608 * (x + 0.044715 * x ** 3)))
        assert ad.gelu(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)

    def test_layer_norm(self):
        x = _param(self.rng.normal(size=(2, 3, 5)))
        gain, bias = _param(self.rng.normal(size=5)), _param(self.rng.normal(size=5))
        w = Tensor(self.rng.normal(size=(2, 3, 5)))
        _check_gradients(lambda: ad.total(ad.mul(ad.layer_norm(x, gain, bias), w)), [x, gain, bias])

    def test_embedding_with_repeated_ids(self):
        table = _param(self.rng.normal(size=(5, 3)))
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        w = Tensor(self.rng.normal(size=(2, 3, 3)))
        _check_gradients(lambda: ad.total(ad.mul(ad.embedding(table, ids), w)), [table])

    def test_concat_slice_mean(self):
        a, b = _param(self.rng.normal(size=(2, 3))), _param(self.rng.normal(size=(2, 2)))

        def fn():
            joined = ad.concat([a, b], axis=1)
            return ad.mean(ad.mul(ad.slice_axis(joined, 1, 1, 4), ad.slice_axis(joined, 1, 1, 4)))

        _check_gradients(fn, [a, b])

    def test_mean_over_axis(self):
        x = _param(self.rng.normal(size=(3, 4)))
        w = Tensor(self.rng.normal(size=3))
        _check_gradients(lambda: ad.total(ad.mul(ad.mean(x, axis=1), w)), [x])

    def test_reshape_permute(self):
        x = _param(self.rng.normal(size=(2, 6)))
        w = Tensor(self.rng.normal(size=(3, 2, 2)))

        def fn():
            y = ad.permute(ad.reshape(x, (2, 3, 2)), (1, 0, 2))
            return ad.total(ad.mul(y, w))

        _check_gradients(fn, [x])

    def test_broadcast_add_and_sub(self):
        x = _param(self.rng.normal(size=(3, 4)))
        bias = _param(self.rng.normal(size=4))
        _check_gradients(lambda: ad.total(ad.gelu((x + bias) - bias * 2.0)), [x, bias])


# ── Backward ──

class TestBackward:
    def test_linear_sum(self):
        w = _param(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.total(w))
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_dead_branch(self):
        w = _param([[1.0, -2.0]])
        ad.backward(ad.mul(Tensor(0.0), ad.total(ad.gelu(w))))
        assert np.array_equal(w.grad, np.zeros((1, 2)))

    def test_unreached_parameter_stays_zero(self):
        used, unused = _param([1.0, 2.0]), _param([3.0])
        ad.backward(ad.total(used))
        assert np.array_equal(unused.grad, [0.0])

    def test_non_scalar_root(self):
        w = _param([1.0, 2.0])
        with pytest.raises(AutodiffUsageError):
            ad.backward(ad.mul(w, w))

    def test_accumulates_until_reset(self):
        w = _param([1.0, 2.0])
        ad.backward(ad.total(w))
        ad.backward(ad.total(w))
        assert np.array_equal(w.grad, [2.0, 2.0])
        ad.zero_grad({"w": w})
        assert np.array_equal(w.grad, [0.0, 0.0])

    def test_two_layer_network_finite_differences(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(4, 5)))
        w1, b1 = _param(rng.normal(scale=0.5, size=(5, 6))), _param(rng.normal(scale=0.1, size=6))
        w2, b2 = _param(rng.normal(scale=0.5, size=(6, 3))), _param(rng.normal(scale=0.1, size=3))
        target = rng.dirichlet(np.ones(3), size=4)

        def fn():
            hidden = ad.gelu(ad.matmul(x, w1) + b1)
            return ad.cross_entropy_soft(ad.matmul(hidden, w2) + b2, target)

        _check_gradients(fn, [w1, b1, w2, b2])

    def test_no_grad_records_nothing(self):
        w = _param([1.0, 2.0])
        with ad.no_grad():
            out = ad.total(ad.mul(w, w))
        assert not out.requires_grad
        assert ad.is_grad_enabled()

    def test_non_finite_raises(self):
        with pytest.raises(NumericalError):
            ad.mul(Tensor([1e308]), Tensor([10.0]))


# ── Adam ──

class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        w = _param([[1.0, -2.0]])
        state = AdamState.for_params({"w": w})
        ad.adam_step({"w": w}, state, lr=1e-3)
        assert np.array_equal(w.data, [[1.0, -2.0]])
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        for g in (1e-3, 1.0, 250.0):
            w = _param([0.0])
            state = AdamState.for_params({"w": w})
            ad.adam_step({"w": w}, state, lr=1e-4, grads={"w": np.array([g])})
            assert abs(w.data[0]) == pytest.approx(1e-4, rel=1e-4)

    def test_two_steps_match_scalar_oracle(self):
        w = _param([0.5])
        state = AdamState.for_params({"w": w})
        grads = [0.3, -1.2]
        for g in grads:
            ad.adam_step({"w": w}, state, lr=0.01, grads={"w": np.array([g])})

        theta, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert w.data[0] == pytest.approx(theta, abs=1e-12)
        assert state.step == 2

    def test_rejects_non_positive_lr(self):
        w = _param([1.0])
        with pytest.raises(ValueError):
            ad.adam_step({"w": w}, AdamState.for_params({"w": w}), lr=0.0)

    def test_shape_mismatch(self):
        w = _param([1.0, 2.0])
        with pytest.raises(DimensionError):
            ad.adam_step({"w": w}, AdamState.for_params({"w": w}), lr=0.1, grads={"w": np.ones(3)})

    def test_rebinding_keeps_snapshots(self):
        w = _param([1.0])
        snapshot = w.data
        ad.adam_step({"w": w}, AdamState.for_params({"w": w}), lr=0.1, grads={"w": np.array([1.0])})
        assert snapshot[0] == 1.0
        assert w.data[0] != 1.0
