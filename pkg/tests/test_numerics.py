import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ltuning.errors import MissingGradientError, ShapeError, VocabularyError
from ltuning.numerics import (
    AdamState, Tape, Tensor, _emit, adam_step, bce_with_logits, concat_rows, cross_entropy_with_logits,
    embedding_gather, finite_diff_check, gelu, layer_norm, matmul, mean_rows, mul, no_grad, relative_error,
    reshape, sgd_step, softmax_lastdim, sum_all, take, transpose,
)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def projected(out_fn, rng, shape):
    """Scalar loss sum(out * R) for a fixed random R; a plain sum hides layer-norm errors."""
    r = Tensor(rng.standard_normal(shape))
    return lambda: sum_all(mul(out_fn(), r))


class TestForward:
    def test_matmul_batched_matches_numpy(self, rng):
        a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((4, 5))
        assert_allclose(matmul(Tensor(a), Tensor(b)).data, np.matmul(a, b).astype(np.float32), rtol=1e-5)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError) as e:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert '(2, 3)' in str(e.value) and '(4, 2)' in str(e.value)

    def test_softmax_rows_sum_to_one(self, rng):
        y = softmax_lastdim(Tensor(rng.standard_normal((4, 6)) * 10))
        assert_allclose(y.data.sum(axis=-1), np.ones(4), rtol=1e-6)

    def test_softmax_large_logits(self):
        y = softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert not np.isnan(y).any()
        assert_allclose(y, [1.0, 0.0], atol=1e-7)

    def test_softmax_closed_form(self):
        assert_allclose(softmax_lastdim(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-6)

    def test_softmax_mask_blocks_positions(self):
        mask = np.array([[False, True, False], [True, True, True]])
        y = softmax_lastdim(Tensor(np.zeros((2, 3))), mask)
        assert_allclose(y.data[0], [0.5, 0.0, 0.5])
        assert_array_equal(y.data[1], np.zeros(3))

    def test_layer_norm_normalizes(self, rng):
        x = Tensor(rng.standard_normal((5, 8)) * 3 + 2)
        y = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert_allclose(y.data.mean(axis=-1), np.zeros(5), atol=1e-5)
        assert_allclose(y.data.std(axis=-1), np.ones(5), atol=1e-3)

    def test_gelu_fixed_points(self):
        y = gelu(Tensor([0.0, 10.0, -10.0]))
        assert_allclose(y.data, [0.0, 10.0, 0.0], atol=1e-5)

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabularyError) as e:
            embedding_gather(Tensor(np.zeros((4, 2))), [1, 4])
        assert '4' in str(e.value)

    def test_concat_rows_trailing_mismatch(self):
        with pytest.raises(ShapeError):
            concat_rows(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestLosses:
    def test_bce_zero_logits_is_ln2(self):
        loss = bce_with_logits(Tensor(np.zeros((6, 2))), [0, 1, 0, 1, 1, 0])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_bce_closed_form(self):
        loss = bce_with_logits(Tensor([[0.0, math.log(3.0)]]), [1])
        assert loss.item() == pytest.approx(0.287682, abs=1e-6)

    def test_bce_rejects_non_binary_targets(self):
        with pytest.raises(ValueError):
            bce_with_logits(Tensor(np.zeros((2, 2))), [0, 2])

    def test_bce_rejects_wrong_width(self):
        with pytest.raises(ShapeError):
            bce_with_logits(Tensor(np.zeros((2, 3))), [0, 1])

    def test_cross_entropy_zero_logits_is_ln_k(self):
        loss = cross_entropy_with_logits(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-6)

    def test_cross_entropy_large_logits_are_finite(self):
        loss = cross_entropy_with_logits(Tensor([[1000.0, -1000.0]]), [1])
        assert math.isfinite(loss.item())


class TestTape:
    def test_no_grad_records_nothing(self, rng):
        w = param(rng, 3, 3)
        with Tape() as tape:
            with no_grad():
                out = matmul(w, w)
        assert len(tape) == 0
        assert not out.requires_grad

    def test_no_tape_records_nothing(self, rng):
        w = param(rng, 2, 2)
        assert not matmul(w, w).requires_grad

    def test_backward_twice_accumulates(self, rng):
        w = param(rng, 3)
        with Tape() as tape:
            loss = sum_all(mul(w, w))
        tape.backward(loss)
        first = w.grad.copy()
        tape.backward(loss)
        assert_allclose(w.grad, 2 * first, rtol=1e-6)
        assert_allclose(first, 2 * w.data, rtol=1e-5)

    def test_backward_needs_scalar(self, rng):
        w = param(rng, 3)
        with Tape() as tape:
            out = mul(w, w)
        with pytest.raises(ShapeError):
            tape.backward(out)


class TestGradients:
    """Central differences against the reverse pass, float64, step 1e-4."""

    def check(self, f, params):
        report = finite_diff_check(f, params, step=1e-4, mode='f64')
        assert report.passed, report.to_dict()

    def test_matmul(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        self.check(projected(lambda: matmul(a, b), rng, (2, 3, 5)), {'a': a, 'b': b})

    def test_layer_norm(self, rng):
        x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
        self.check(projected(lambda: layer_norm(x, g, b), rng, (3, 6)), {'x': x, 'gain': g, 'bias': b})

    def test_masked_softmax(self, rng):
        x = param(rng, 2, 4, 4)
        mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
        self.check(projected(lambda: softmax_lastdim(x, mask), rng, (2, 4, 4)), {'x': x})

    def test_gelu(self, rng):
        x = param(rng, 10)
        self.check(projected(lambda: gelu(x), rng, (10,)), {'x': x})

    @pytest.mark.parametrize('seed', range(6))
    def test_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        n, k = (int(s) for s in rng.integers(2, 5, size=2))
        p = int(rng.integers(3, 7))
        a, b = param(rng, n, k), param(rng, k, p)
        g, c = param(rng, p), param(rng, p)
        f = projected(lambda: softmax_lastdim(gelu(layer_norm(matmul(a, b), g, c))), rng, (n, p))
        self.check(f, {'a': a, 'b': b, 'gain': g, 'bias': c})

    def test_reshape_transpose_take(self, rng):
        x = param(rng, 2, 3, 4)
        idx = (np.array([0, 1, 0]), 2)
        f = projected(lambda: take(transpose(reshape(x, (2, 12)), (1, 0)), (slice(None), 1)), rng, (12,))
        self.check(f, {'x': x})
        self.check(projected(lambda: take(x, idx), rng, (3, 4)), {'x': x})

    def test_embedding_repeated_ids(self, rng):
        table = param(rng, 5, 3)
        self.check(projected(lambda: embedding_gather(table, [[1, 1], [4, 0]]), rng, (2, 2, 3)), {'table': table})

    def test_concat_and_mean_rows(self, rng):
        a, b = param(rng, 2, 3), param(rng, 4, 3)
        self.check(projected(lambda: mean_rows(concat_rows(a, b)), rng, (3,)), {'a': a, 'b': b})

    def test_cross_entropy(self, rng):
        logits = param(rng, 4, 3)
        self.check(lambda: cross_entropy_with_logits(logits, [0, 2, 1, 2]), {'logits': logits})

    def test_detects_wrong_gradient(self, rng):
        x = param(rng, 3)

        def wrong():
            return sum_all(_emit('double', (x,), x.data * 2, lambda g: (g * 3,)))

        report = finite_diff_check(wrong, {'x': x}, mode='f64')
        assert not report.passed
        assert report.errors['x'] == pytest.approx(1 / 3, rel=1e-6)

    def test_restores_parameters(self, rng):
        x = param(rng, 4)
        before = x.data.copy()
        finite_diff_check(lambda: sum_all(mul(x, x)), {'x': x}, mode='f64')
        assert x.dtype == np.float32
        assert_array_equal(x.data, before)
        assert x.grad is None

    def test_non_finite_is_reported(self, rng):
        x = param(rng, 2)
        report = finite_diff_check(lambda: sum_all(_emit('inf', (x,), x.data * np.inf, lambda g: (g,))), {'x': x})
        assert report.non_finite and not report.passed

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert relative_error(np.array([1.0]), np.array([0.5]))[0] == pytest.approx(0.5)


class TestOptimizers:
    def test_adam_first_step_moves_by_lr(self):
        p = Tensor([1.0, -1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -2.0, 0.0], dtype=np.float32)
        adam_step({'p': p}, AdamState(lr=0.1))
        assert_allclose(p.data, [0.9, -0.9, 2.0], atol=1e-6)
        assert p.grad is None

    def test_adam_missing_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(MissingGradientError) as e:
            adam_step({'zeta.head': p}, AdamState())
        assert 'zeta.head' in str(e.value)

    def test_adam_skips_empty_parameters(self):
        empty = Tensor(np.zeros((0, 4)), requires_grad=True)
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        adam_step({'empty': empty, 'p': p}, AdamState())
        assert empty.shape == (0, 4)

    def test_sgd_step(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([1.0, -1.0], dtype=np.float32)
        sgd_step({'p': p}, 0.5)
        assert_allclose(p.data, [0.5, 2.5])

    def test_step_clears_gradients(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([1.0, -1.0], dtype=np.float32)
        sgd_step({'p': p}, 0.5)
        assert p.grad is None

    @pytest.mark.parametrize('step', [lambda params: adam_step(params, AdamState()),
                                      lambda params: sgd_step(params, 0.1)])
    def test_second_step_without_backward(self, step):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        step({'psi.transform': p})
        with pytest.raises(MissingGradientError) as e:
            step({'psi.transform': p})
        assert 'psi.transform' in str(e.value)

    def test_adam_steps_decrease_a_quadratic(self):
        x = Tensor([3.0], requires_grad=True)
        state = AdamState(lr=0.1)
        values = []
        for _ in range(3):
            with Tape() as tape:
                loss = sum_all(mul(x, x))
            values.append(loss.item())
            tape.backward(loss)
            adam_step({'x': x}, state)
        assert values[0] > values[1] > values[2]
        assert state.t == 3
