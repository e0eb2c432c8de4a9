import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motioncodes import tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


def fd_check(f, point, tol=1e-4, h=1e-5):
    with T.precision("float64"):
        err = T.check_gradients(f, T.Tensor(point), h=h)
    assert err < tol, f"finite-difference mismatch: {err}"


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)

    def test_single_unmasked_entry(self):
        out = T.softmax_rows(T.Tensor([[0.7, 123.0]]), mask=np.array([[False, True]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_fully_masked_row_is_zero(self):
        out = T.softmax_rows(T.Tensor([[1.0, 2.0]]), mask=np.array([[True, True]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.softmax_rows(T.Tensor([[1.0, 2.0]]), mask=np.array([True, False]))

    def test_rows_match_extended_precision(self):
        # independent oracle: recompute each row with 50-digit mpmath arithmetic
        x = rng(3).normal(size=(4, 4))
        with T.precision("float64"):
            got = T.softmax_rows(T.Tensor(x)).data
        mpmath.mp.dps = 50
        for i in range(4):
            exps = [mpmath.exp(mpmath.mpf(v)) for v in x[i]]
            total = sum(exps)
            expect = np.array([float(e / total) for e in exps])
            assert np.max(np.abs(got[i] - expect)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_row_stochastic_and_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(5, 7)) * 10
        mask = r.random((5, 7)) < 0.3
        out = T.softmax_rows(T.Tensor(x), mask=mask).data
        assert (out >= 0).all()
        assert (out[mask] == 0).all()
        sums = out.sum(axis=1)
        full = mask.all(axis=1)
        np.testing.assert_allclose(sums[~full], 1.0, atol=1e-6)
        np.testing.assert_array_equal(sums[full], 0.0)

    def test_forward_determinism(self):
        x = rng(11).normal(size=(6, 6))
        a = T.softmax_rows(T.Tensor(x)).data
        b = T.softmax_rows(T.Tensor(x)).data
        assert (a == b).all()


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(rng(1).normal(size=(2, 3)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_squared_norm(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_backward_twice_is_error(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_module_level_backward(self):
        x = T.Tensor([3.0], requires_grad=True)
        with T.Tape():
            loss = T.reduce_sum(T.mul(x, x))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0], rtol=1e-6)

    def test_unrecorded_loss_rejected(self):
        c = T.Tensor(1.0)
        with pytest.raises(ValueError):
            T.backward(c)

    def test_nonparticipating_tensor_gets_zero_grad(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.Tensor([5.0, 5.0], requires_grad=True)
        with T.Tape() as tape:
            _dead_end = T.mul(y, 2.0)
            loss = T.reduce_sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(y.grad, [0.0, 0.0])

    def test_grad_accumulates_across_uses(self):
        x = T.Tensor([2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.add(T.mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0], rtol=1e-6)


class TestCheckGradients:
    def test_constant_function(self):
        with T.precision("float64"):
            err = T.check_gradients(lambda x: T.Tensor(4.0), T.Tensor([1.0, 1.0]))
        assert err == 0.0

    def test_quadratic(self):
        with T.precision("float64"):
            err = T.check_gradients(
                lambda x: T.reduce_sum(T.mul(x, x)), T.Tensor([1.0, 1.0])
            )
        assert err < 1e-8

    def test_nonfinite_output_raises(self):
        def f(x):
            return T.Tensor(np.inf)

        with pytest.raises(T.NumericalError):
            T.check_gradients(f, T.Tensor([1.0]))


def weighted(op):
    """Scalarize with fixed non-uniform weights so transposition bugs surface."""

    def run(x):
        y = op(x)
        w = T.Tensor(np.linspace(0.3, 1.7, int(np.prod(y.shape))).reshape(y.shape))
        return T.reduce_sum(T.mul(y, w))

    return run


class TestPrimitiveGradients:
    def test_add_broadcast(self):
        b = rng(5).normal(size=(4,))
        fd_check(weighted(lambda x: T.add(x, T.Tensor(b))), rng(6).normal(size=(3, 4)))
        x = rng(7).normal(size=(3, 4))
        fd_check(weighted(lambda b_: T.add(T.Tensor(x), b_)), b)

    def test_sub(self):
        b = rng(8).normal(size=(3, 4))
        fd_check(weighted(lambda x: T.sub(x, T.Tensor(b))), rng(9).normal(size=(3, 4)))

    def test_mul(self):
        b = rng(10).normal(size=(3, 4))
        fd_check(weighted(lambda x: T.mul(x, T.Tensor(b))), rng(11).normal(size=(3, 4)))

    def test_matmul_2d(self):
        b = rng(12).normal(size=(4, 5))
        fd_check(weighted(lambda x: T.matmul(x, T.Tensor(b))), rng(13).normal(size=(3, 4)))
        a = rng(14).normal(size=(3, 4))
        fd_check(weighted(lambda x: T.matmul(T.Tensor(a), x)), b)

    def test_matmul_batched(self):
        b = rng(15).normal(size=(2, 4, 5))
        fd_check(weighted(lambda x: T.matmul(x, T.Tensor(b))), rng(16).normal(size=(2, 3, 4)))

    def test_reshape_swapaxes(self):
        fd_check(
            weighted(lambda x: T.swapaxes(T.reshape(x, (4, 3)), 0, 1)),
            rng(17).normal(size=(3, 4)),
        )

    def test_reduce_sum_axis(self):
        fd_check(weighted(lambda x: T.reduce_sum(x, axis=0)), rng(18).normal(size=(3, 4)))
        fd_check(
            weighted(lambda x: T.reduce_sum(x, axis=1, keepdims=True)),
            rng(19).normal(size=(3, 4)),
        )

    def test_reduce_mean(self):
        fd_check(lambda x: T.reduce_mean(x), rng(20).normal(size=(3, 4)))

    def test_relu(self):
        x = rng(21).normal(size=(3, 4))
        x[np.abs(x) < 0.05] += 0.1  # keep away from the kink
        fd_check(weighted(T.relu), x)

    def test_absolute(self):
        x = rng(22).normal(size=(3, 4))
        x[np.abs(x) < 0.05] += 0.1
        fd_check(weighted(T.absolute), x)

    def test_softmax(self):
        fd_check(weighted(T.softmax_rows), rng(23).normal(size=(3, 4)))
        mask = rng(24).random((3, 4)) < 0.3
        mask[:, 0] = False
        fd_check(weighted(lambda x: T.softmax_rows(x, mask=mask)), rng(25).normal(size=(3, 4)))

    def test_log_softmax(self):
        fd_check(weighted(T.log_softmax_rows), rng(26).normal(size=(3, 4)))

    def test_layer_norm(self):
        g = rng(27).normal(size=(4,))
        b = rng(28).normal(size=(4,))
        x = rng(29).normal(size=(3, 4))
        fd_check(weighted(lambda x_: T.layer_norm(x_, T.Tensor(g), T.Tensor(b))), x)
        fd_check(weighted(lambda g_: T.layer_norm(T.Tensor(x), g_, T.Tensor(b))), g)
        fd_check(weighted(lambda b_: T.layer_norm(T.Tensor(x), T.Tensor(g), b_)), b)

    def test_window_stack(self):
        fd_check(weighted(lambda x: T.window_stack(x, 3)[0]), rng(30).normal(size=(5, 2)))

    def test_slice_frames(self):
        fd_check(weighted(lambda x: T.slice_frames(x, 1, 4)), rng(31).normal(size=(5, 2)))

    def test_gather_rows(self):
        idx = np.array([0, 2, 2, 1])
        fd_check(weighted(lambda t: T.gather_rows(t, idx)), rng(32).normal(size=(3, 4)))

    def test_pick_per_row(self):
        idx = np.array([1, 3, 0])
        fd_check(weighted(lambda x: T.pick_per_row(x, idx)), rng(33).normal(size=(3, 4)))

    def test_segment_mean(self):
        bounds = [(0, 2), (2, 5)]
        fd_check(weighted(lambda x: T.segment_mean(x, bounds)), rng(34).normal(size=(5, 3)))

    def test_straight_through(self):
        q = rng(35).normal(size=(3, 4))
        x = T.Tensor(rng(36).normal(size=(3, 4)), requires_grad=True)
        g_in = rng(37).normal(size=(3, 4)).astype(np.float32)
        with T.Tape() as tape:
            out = T.straight_through(x, q)
            loss = T.reduce_sum(T.mul(out, T.Tensor(g_in)))
        np.testing.assert_array_equal(out.data, q.astype(np.float32))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, g_in)

    def test_detach_blocks_gradient(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.mul(T.detach(x), x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [1.0, 2.0], rtol=1e-6)

    def test_linear_with_bias(self):
        w = rng(38).normal(size=(4, 2))
        b = rng(39).normal(size=(2,))
        fd_check(
            weighted(lambda x: T.linear(x, T.Tensor(w), T.Tensor(b))),
            rng(40).normal(size=(5, 3, 4)),
        )


class TestPrecisionModes:
    def test_default_is_float32(self):
        assert T.default_dtype() == np.float32
        assert T.Tensor([1.0]).data.dtype == np.float32

    def test_context_switches_and_restores(self):
        with T.precision("float64"):
            assert T.Tensor([1.0]).data.dtype == np.float64
        assert T.Tensor([1.0]).data.dtype == np.float32

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            T.set_precision("float16")


class TestWindowStack:
    def test_single_frame(self):
        out, pad = T.window_stack(T.Tensor([[7.0, 8.0]]), 3)
        np.testing.assert_array_equal(out.data, [[[0, 0], [0, 0], [7, 8]]])
        np.testing.assert_array_equal(pad, [[True, True, False]])

    def test_three_frames_window_two(self):
        f = np.array([[1.0], [2.0], [3.0]])
        out, pad = T.window_stack(T.Tensor(f), 2)
        np.testing.assert_array_equal(out.data, [[[0], [1]], [[1], [2]], [[2], [3]]])
        np.testing.assert_array_equal(pad, [[True, False], [False, False], [False, False]])

    def test_gather_matches_index_oracle(self):
        x = rng(41).normal(size=(16, 3)).astype(np.float32)
        out, pad = T.window_stack(T.Tensor(x), 5)
        for t in range(16):
            for j in range(5):
                s = t - 4 + j
                if s < 0:
                    assert pad[t, j]
                    assert (out.data[t, j] == 0).all()
                else:
                    assert not pad[t, j]
                    np.testing.assert_array_equal(out.data[t, j], x[s])
