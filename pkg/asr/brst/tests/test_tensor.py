from __future__ import annotations

import numpy as np
import pytest

from brst import tensor as T
from brst.errors import ContractError, EvaluationError, ShapeError
from brst.tensor import ParamStore, Tape, Tensor, backward, finite_diff_check, parameter

TOLERANCE = 1e-6


def _param(shape, seed, name="p"):
    return parameter(np.random.default_rng(seed).standard_normal(shape), name)


class TestTape:
    def test_records_only_differentiable_ops(self):
        x = _param((3,), 0)
        constant = Tensor(np.ones(3))
        with Tape() as tape:
            T.sum_(x * 2.0)
            constant + constant
        assert tape.ops() == ["mul", "sum"]

    def test_no_grad_records_nothing(self):
        x = _param((3,), 0)
        with Tape() as tape:
            with T.no_grad():
                y = T.sum_(T.exp(x))
        assert len(tape) == 0
        assert not y.requires_grad

    def test_reused_leaf_accumulates_adjoints(self):
        x = _param((4,), 1)
        with Tape() as tape:
            loss = T.sum_(x * x + x)
        grads = backward(tape, loss, [x])
        np.testing.assert_allclose(grads[x], 2.0 * x.data + 1.0)

    def test_unreached_parameter_gets_zeros(self):
        x, unused = _param((2,), 0, "x"), _param((3,), 1, "unused")
        with Tape() as tape:
            loss = T.sum_(x)
        grads = backward(tape, loss, [x, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros(3))

    def test_backward_needs_scalar(self):
        x = _param((2,), 0)
        with Tape() as tape:
            y = x * 3.0
        with pytest.raises(ContractError):
            backward(tape, y, [x])

    def test_broadcast_mismatch_is_shape_error(self):
        with pytest.raises(ShapeError):
            _param((2, 3), 0) + _param((4,), 1)
        with pytest.raises(ShapeError):
            _param((2, 3), 0) @ _param((2, 3), 1)


class TestGradients:
    """Tape gradients against central finite differences."""

    def test_elementwise_and_reductions(self):
        a, b = _param((3, 4), 0, "a"), parameter(np.random.default_rng(1).uniform(0.5, 2.0, (4,)), "b")
        f = lambda: T.mean(T.exp(a * 0.3) * b - T.log(b) + T.relu(a - 0.1))
        assert finite_diff_check(f, [a, b]) < TOLERANCE

    def test_matmul_with_broadcast_batch(self):
        a, b = _param((2, 3, 4), 2, "a"), _param((4, 5), 3, "b")
        f = lambda: T.sum_((a @ b) * (a @ b))
        assert finite_diff_check(f, [a, b]) < TOLERANCE

    def test_shape_ops(self):
        x = _param((2, 3, 4), 4)
        f = lambda: T.sum_(
            T.concat([x.transpose(0, 2, 1).reshape(2, 12), x[:, 1] * 2.0], axis=1) * x[0, 0, 0]
        )
        assert finite_diff_check(f, [x]) < TOLERANCE

    def test_softmax_and_log_softmax(self):
        x = _param((3, 5), 5)
        weights = np.random.default_rng(6).standard_normal((3, 5))
        f = lambda: T.sum_(T.softmax(x) * weights) + T.sum_(T.log_softmax(x, axis=0) * weights)
        assert finite_diff_check(f, [x]) < TOLERANCE

    def test_layer_norm(self):
        x, gain, bias = _param((2, 3, 6), 7, "x"), _param((6,), 8, "gain"), _param((6,), 9, "bias")
        weights = np.random.default_rng(10).standard_normal((2, 3, 6))
        f = lambda: T.sum_(T.layer_norm(x, gain, bias) * weights)
        assert finite_diff_check(f, [x, gain, bias]) < TOLERANCE

    def test_embedding_scatters_repeated_ids(self):
        weight = _param((5, 3), 11)
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        scale = np.random.default_rng(12).standard_normal((2, 3, 3))
        f = lambda: T.sum_(T.embedding(weight, ids) * scale)
        assert finite_diff_check(f, [weight]) < TOLERANCE

    def test_strided_conv2d(self):
        x = _param((1, 2, 9, 7), 13, "x")
        weight, bias = _param((3, 2, 3, 3), 14, "w"), _param((3,), 15, "b")
        scale = np.random.default_rng(16).standard_normal((1, 3, 4, 3))
        f = lambda: T.sum_(T.conv2d(x, weight, bias, stride=2) * scale)
        assert finite_diff_check(f, [x, weight, bias]) < TOLERANCE

    def test_non_finite_evaluation_is_reported(self):
        x = parameter(np.array([1e-7]), "x")
        with pytest.raises(EvaluationError):
            finite_diff_check(lambda: T.sum_(T.log(x)), [x], h=1e-6)


class TestDropout:
    def test_identity_without_generator(self):
        x = _param((4, 4), 0)
        assert T.dropout(x, 0.5, None) is x

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones((8, 8)))
        first = T.dropout(x, 0.25, np.random.default_rng(3)).data
        second = T.dropout(x, 0.25, np.random.default_rng(3)).data
        np.testing.assert_array_equal(first, second)
        assert set(np.unique(first)) <= {0.0, 1.0 / 0.75}


class TestParamStore:
    def test_clone_is_independent(self):
        store = ParamStore()
        store.add("layer.weight", np.ones((2, 2)))
        copy = store.clone()
        copy["layer.weight"].data[0, 0] = 5.0
        assert store["layer.weight"].data[0, 0] == 1.0
        assert not store.allclose(copy)

    def test_duplicate_names_rejected(self):
        store = ParamStore()
        store.add("a.bias", np.zeros(2))
        with pytest.raises(ContractError):
            store.add("a.bias", np.zeros(2))

    def test_num_elements_by_prefix(self):
        store = ParamStore()
        store.add("encoder.x", np.zeros((3, 4)))
        store.add("decoder.x", np.zeros(5))
        assert store.num_elements() == 17
        assert store.num_elements("encoder.") == 12
