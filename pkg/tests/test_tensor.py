import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from enct5 import tensor as T
from enct5.tensor import EmptyLossSupportError, NonFiniteError, Rng

from conftest import central_difference, max_rel_error


def _probe(shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


def _check_grad(build, inputs, seed=0, tol=1e-4):
    """Compare autodiff of sum(build(*tensors) * probe) with central differences."""
    ts = [T.parameter(a.copy()) for a in inputs]
    out = build(*ts)
    probe = _probe(out.shape, seed)
    T.backward((out * probe).sum())

    def f(*arrs):
        with T.no_grad():
            return float((build(*[T.tensor(a) for a in arrs]).data * probe).sum())

    fds = central_difference(f, [a.copy() for a in inputs])
    for t, fd in zip(ts, fds):
        assert max_rel_error(t.grad, fd) < tol


class TestMatmul:
    def test_identity(self):
        a = T.tensor(np.eye(2))
        b = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])

    def test_hand_arithmetic(self):
        assert (T.tensor([[1.0, 2.0]]) @ T.tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ta, tb = T.parameter(a), T.parameter(b)
        T.backward(T.matmul(ta, tb).sum())
        fa, fb = central_difference(lambda x, y: float((x @ y).sum()), [a.copy(), b.copy()])
        assert max_rel_error(ta.grad, fa) < 1e-6
        assert max_rel_error(tb.grad, fb) < 1e-6

    def test_batched_and_shared_weight(self):
        rng = np.random.default_rng(4)
        _check_grad(lambda x, w: x @ w, [rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (4, 5))])
        _check_grad(lambda x, y: x @ y, [rng.uniform(-2, 2, (2, 2, 3, 4)), rng.uniform(-2, 2, (2, 2, 4, 3))])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_single_element_is_one(self):
        assert T.softmax_lastdim(T.tensor([5.0])).data.tolist() == [1.0]

    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_lastdim(T.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_masked_last_position(self):
        mask = np.array([0.0, 0.0, T.mask_value()])
        out = T.softmax_lastdim(T.tensor([1.0, 2.0, 3.0]), mask).data
        e1, e2 = math.exp(1.0), math.exp(2.0)
        np.testing.assert_allclose(out, [e1 / (e1 + e2), e2 / (e1 + e2), 0.0], rtol=1e-15, atol=0)
        assert out[2] == 0.0

    def test_fully_masked_row_is_zero(self):
        mask = np.full((2, 3), T.mask_value())
        mask[0] = 0.0
        out = T.softmax_lastdim(T.tensor(np.ones((2, 3))), mask).data
        assert np.all(out[1] == 0.0)
        assert not np.any(np.isnan(out))

    def test_one_unmasked_key_is_exactly_one(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 7)) * 10
        mask = np.full((20, 7), T.mask_value())
        keep = rng.integers(0, 7, 20)
        mask[np.arange(20), keep] = 0.0
        out = T.softmax_lastdim(T.tensor(x), mask).data
        assert np.all(out[np.arange(20), keep] == 1.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), arrays(np.bool_, (4, 6)))
    def test_rows_sum_to_one(self, x, allowed):
        mask = np.where(allowed, 0.0, T.mask_value())
        out = T.softmax_lastdim(T.tensor(x), mask).data
        sums = out.sum(axis=-1)
        for row_sum, row_allowed in zip(sums, allowed):
            if row_allowed.any():
                assert abs(row_sum - 1.0) <= 1e-12
            else:
                assert row_sum == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(5)
        mask = np.where(rng.random((3, 5)) < 0.3, T.mask_value(), 0.0)
        mask[:, 0] = 0.0
        _check_grad(lambda x: T.softmax_lastdim(x, mask), [rng.uniform(-2, 2, (3, 5))])


class TestRmsNorm:
    def test_ones(self):
        out = T.rms_norm(T.tensor(np.ones(4)), T.tensor(np.ones(4)), eps=1e-12).data
        np.testing.assert_allclose(out, np.ones(4), rtol=1e-12)

    def test_scaling_out_rms(self):
        assert T.rms_norm(T.tensor([2.0, 2.0]), T.tensor([1.0, 1.0]), eps=0.0).data.tolist() == [1.0, 1.0]

    def test_gradient(self):
        rng = np.random.default_rng(6)
        _check_grad(lambda x, s: T.rms_norm(x, s, 1e-6), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, 4)])


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.tensor([0.0])).data.tolist() == [0.0]

    def test_tanh_constants(self):
        x = 1.3
        want = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert T.gelu(T.tensor([x])).data[0] == pytest.approx(want, abs=1e-15)

    def test_gradient(self):
        _check_grad(T.gelu, [np.random.default_rng(7).uniform(-2, 2, (3, 4))])


class TestGatherAndShapes:
    def test_gather_rows(self):
        table = np.arange(12.0).reshape(4, 3)
        out = T.gather_rows(T.tensor(table), np.array([[3, 0], [1, 1]])).data
        np.testing.assert_array_equal(out, table[[[3, 0], [1, 1]]])

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather_rows(T.tensor(np.zeros((3, 2))), [3])

    def test_gather_gradient(self):
        ids = np.array([[0, 2, 2], [1, 0, 3]])
        _check_grad(lambda t: T.gather_rows(t, ids), [np.random.default_rng(8).uniform(-2, 2, (4, 3))])

    def test_elementwise_and_reshape_gradients(self):
        rng = np.random.default_rng(9)
        a, b = rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (1, 3, 1))
        _check_grad(lambda x, y: (x * y + x - y).transpose(0, 2, 1).reshape(2, 12), [a, b])
        _check_grad(lambda x: T.broadcast_to(x, (2, 3, 4)), [rng.uniform(-2, 2, (3, 1))])
        _check_grad(lambda x: x[..., 1], [a])
        _check_grad(lambda x: x.mean(axis=-1), [a])


class TestLosses:
    def test_uniform_logits_give_log_c(self):
        C = 7
        loss = T.cross_entropy_masked(T.tensor(np.zeros((5, C))), np.arange(5) % C, np.ones(5))
        assert loss.item() == pytest.approx(math.log(C), abs=1e-15)

    def test_empty_support(self):
        with pytest.raises(EmptyLossSupportError, match="empty loss support"):
            T.cross_entropy_masked(T.tensor(np.zeros((2, 3))), [1, 1], [0, 0])
        with pytest.raises(EmptyLossSupportError):
            T.mse_masked(T.tensor(np.zeros(2)), [1.0, 1.0], [0, 0])

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(10)
        targets = rng.integers(0, 4, (3, 5))
        mask = (rng.random((3, 5)) < 0.7).astype(float)
        mask[0, 0] = 1
        _check_grad(lambda x: T.cross_entropy_masked(x, targets, mask), [rng.uniform(-2, 2, (3, 5, 4))])

    def test_mse_gradient(self):
        rng = np.random.default_rng(11)
        y = rng.normal(size=(4, 3))
        mask = np.array([[1, 0, 1]] * 4, dtype=float)
        _check_grad(lambda x: T.mse_masked(x, y, mask), [rng.uniform(-2, 2, (4, 3))])

    def test_masked_duplicate_row_is_bit_identical(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 5))
        targets = rng.integers(0, 5, 4)

        def run(xs, ts, mask):
            tw = T.parameter(w.copy())
            loss = T.cross_entropy_masked(T.tensor(xs) @ tw, ts, mask)
            T.backward(loss)
            return loss.data, tw.grad

        l1, g1 = run(x, targets, np.ones(4))
        l2, g2 = run(np.vstack([x, x[1:2]]), np.append(targets, targets[1]), np.array([1, 1, 1, 1, 0.0]))
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_zeroed_vs_masked_target(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(2, 3, 4))
        t1 = rng.integers(1, 4, (2, 3))
        t2 = t1.copy()
        t2[1, 2] = 0
        mask = np.ones((2, 3))
        mask[1, 2] = 0
        grads = []
        for t in (t1, t2):
            p = T.parameter(logits.copy())
            T.backward(T.cross_entropy_masked(p, t, mask))
            grads.append(p.grad)
        assert grads[0].tobytes() == grads[1].tobytes()
        assert np.all(grads[0][1, 2] == 0.0)


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = T.parameter([1.5, -2.0])
        y = x * x
        T.backward((y + y * 3.0).sum())
        np.testing.assert_allclose(x.grad, 8 * np.array([1.5, -2.0]))

    def test_topological_order_parents_first(self):
        x = T.parameter([1.0])
        y = x * 2.0
        z = y + x
        order = T.topological_order(z.sum())
        assert order.index(x) < order.index(y) < order.index(z)

    def test_checked_mode_raises_on_nan(self):
        with T.checked():
            with pytest.raises(NonFiniteError):
                T.tensor([np.inf]) * 0.0

    def test_no_grad_builds_no_graph(self):
        x = T.parameter([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_float32_is_preserved(self):
        T.set_default_dtype(np.float32)
        x = T.parameter(np.ones(3, dtype=np.float32))
        assert (x * 0.5 + 1.0).dtype == np.float32


class TestRng:
    def test_same_seed_same_draws(self):
        a, b = Rng(42), Rng(42)
        assert a.normal(size=5).tobytes() == b.normal(size=5).tobytes()
        assert a.integers(0, 100, 5).tolist() == b.integers(0, 100, 5).tolist()

    def test_named_streams_are_independent_of_order(self):
        x = Rng.for_name(1, "head/bos_embedding").normal(size=3)
        Rng.for_name(1, "other").normal(size=10)
        y = Rng.for_name(1, "head/bos_embedding").normal(size=3)
        assert x.tobytes() == y.tobytes()
        assert Rng.for_name(2, "head/bos_embedding").normal(size=3).tobytes() != x.tobytes()
