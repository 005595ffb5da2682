import numpy as np
import pytest

import ttalab.tensor as T
from ttalab.tensor import (LrSchedule, NumericError, TapeError, Tensor, adam_step,
                           backward, conv2d, conv2d_1x1, l1_distance, make_adam,
                           mse_loss, read_tnsr, write_tnsr, zero_grads)

rng = np.random.default_rng(12345)


def conv2d_reference(x, k, stride, padding):
    """Direct 6-nested-loop cross-correlation."""
    cout, cin, kh, kw = k.shape
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo), dtype=np.float64)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + b] * k[o, ci, a, b]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_scaling_identity(self):
        x = Tensor(np.ones((1, 3, 3), np.float32))
        k = Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
        out = conv2d(x, k, stride=1, padding=0)
        assert np.array_equal(out.data, np.full((1, 3, 3), 2.0, np.float32))

    def test_single_pixel_sum(self):
        x = Tensor(np.full((1, 1, 1), 5.0, np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), np.float32))
        out = conv2d(x, k, stride=1, padding=1)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(5.0)

    def test_matches_loop_oracle(self):
        x = rng.normal(size=(2, 4, 4)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
        ref = conv2d_reference(x, k, 1, 1)
        assert np.abs(out - ref).max() < 1e-5

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle_strides(self, stride, padding):
        x = rng.normal(size=(3, 6, 6)).astype(np.float32)
        k = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        ref = conv2d_reference(x, k, stride, padding)
        assert np.abs(out - ref).max() < 1e-5

    def test_batched_matches_per_sample(self):
        xb = rng.normal(size=(4, 2, 6, 6)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        out = conv2d(Tensor(xb), Tensor(k), stride=2, padding=1).data
        for b in range(4):
            single = conv2d(Tensor(xb[b]), Tensor(k), stride=2, padding=1).data
            assert np.array_equal(out[b], single)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_non_positive_output(self):
        with pytest.raises(ValueError, match="non-positive"):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestConv1x1:
    def test_identity_kernel_bitwise(self):
        x = rng.normal(size=(4, 5, 5)).astype(np.float32)
        k = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = conv2d_1x1(Tensor(x), Tensor(k), Tensor(np.zeros(4, np.float32)))
        assert np.array_equal(out.data, x)

    def test_sum_difference_channels(self):
        a = rng.normal(size=(3, 3)).astype(np.float32)
        b = rng.normal(size=(3, 3)).astype(np.float32)
        x = np.stack([a, b])
        k = np.array([[1.0, 1.0], [1.0, -1.0]], np.float32).reshape(2, 2, 1, 1)
        out = conv2d_1x1(Tensor(x), Tensor(k), Tensor(np.zeros(2, np.float32))).data
        assert np.allclose(out[0], a + b, atol=1e-6)
        assert np.allclose(out[1], a - b, atol=1e-6)

    def test_matches_per_pixel_matmul(self):
        x = rng.normal(size=(3, 5, 5)).astype(np.float32)
        k = rng.normal(size=(4, 3, 1, 1)).astype(np.float32)
        bias = rng.normal(size=4).astype(np.float32)
        out = conv2d_1x1(Tensor(x), Tensor(k), Tensor(bias)).data
        w = k.reshape(4, 3)
        for i in range(5):
            for j in range(5):
                ref = w @ x[:, i, j] + bias
                assert np.abs(out[:, i, j] - ref).max() < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d_1x1(Tensor(np.zeros((3, 4, 4))),
                       Tensor(np.zeros((2, 2, 1, 1))), Tensor(np.zeros(2)))


class TestBackward:
    def test_linear_form_grad_is_input(self):
        x = rng.normal(size=(3, 4)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        loss = T.tensor_sum(T.mul(w, Tensor(x)))
        backward(loss)
        assert np.allclose(w.grad, x, atol=1e-6)

    def test_constant_loss_zero_grad(self):
        w = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
        zero_grads([w])
        loss = T.add(T.scale(T.tensor_sum(w), 0.0), Tensor(np.float32(3.0)))
        backward(loss)
        assert np.array_equal(w.grad, np.zeros((2, 2), np.float32))

    def test_conv_kernel_grad_matches_finite_differences(self):
        x = Tensor(rng.normal(size=(2, 5, 5)).astype(np.float32) * 0.5)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32) * 0.5,
                   requires_grad=True)
        tgt = Tensor(rng.normal(size=(2, 5, 5)).astype(np.float32) * 0.5)

        def loss_value():
            return mse_loss(conv2d(x, k, stride=1, padding=1), tgt).item()

        loss = mse_loss(conv2d(x, k, stride=1, padding=1), tgt)
        zero_grads([k])
        backward(loss)
        h = 1e-3
        for idx in np.ndindex(k.data.shape):
            orig = k.data[idx]
            k.data[idx] = orig + h
            lp = loss_value()
            k.data[idx] = orig - h
            lm = loss_value()
            k.data[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - k.grad[idx]) <= max(1e-3, 1e-2 * abs(fd))

    def test_accumulation_without_reset(self):
        w = Tensor(np.ones((2,), np.float32), requires_grad=True)
        x = Tensor(np.array([2.0, 3.0], np.float32))
        backward(T.tensor_sum(T.mul(w, x)))
        backward(T.tensor_sum(T.mul(w, x)))
        assert np.allclose(w.grad, 2 * x.data)
        zero_grads([w])
        assert np.array_equal(w.grad, np.zeros(2, np.float32))

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones((2,), np.float32), requires_grad=True)
        with pytest.raises(TapeError, match="scalar"):
            backward(T.mul(w, w))

    def test_off_tape_loss_rejected(self):
        with pytest.raises(TapeError, match="tape"):
            backward(Tensor(np.float32(1.0)))

    def test_no_grad_suppresses_tape(self):
        w = Tensor(np.ones((2,), np.float32), requires_grad=True)
        with T.no_grad():
            out = T.tensor_sum(T.mul(w, w))
        assert not out.requires_grad


class TestLosses:
    def test_l1_identical(self):
        a = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
        assert l1_distance(a, a).item() == 0.0

    def test_l1_constant(self):
        a = Tensor(np.ones((4, 4), np.float32))
        b = Tensor(np.full((4, 4), 0.25, np.float32))
        assert l1_distance(a, b).item() == pytest.approx(0.75)

    def test_l1_matches_summation_oracle(self):
        a = rng.normal(size=(3, 7, 5)).astype(np.float32)
        b = rng.normal(size=(3, 7, 5)).astype(np.float32)
        got = l1_distance(Tensor(a), Tensor(b)).item()
        ref = sum(abs(float(u) - float(v)) for u, v in zip(a.flat, b.flat)) / a.size
        assert got == pytest.approx(ref, abs=1e-6)

    def test_mse_identical(self):
        a = Tensor(rng.normal(size=(5,)).astype(np.float32))
        assert mse_loss(a, a).item() == 0.0

    def test_mse_constant(self):
        a = Tensor(np.ones((4, 4), np.float32))
        b = Tensor(np.full((4, 4), 0.5, np.float32))
        assert mse_loss(a, b).item() == pytest.approx(0.25)

    def test_mse_matches_summation_oracle(self):
        a = rng.normal(size=(2, 6, 6)).astype(np.float32)
        b = rng.normal(size=(2, 6, 6)).astype(np.float32)
        got = mse_loss(Tensor(a), Tensor(b)).item()
        ref = sum((float(u) - float(v)) ** 2 for u, v in zip(a.flat, b.flat)) / a.size
        assert got == pytest.approx(ref, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            l1_distance(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ValueError, match="shape mismatch"):
            mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestAdam:
    def test_first_step_near_minus_lr(self):
        p = Tensor(np.zeros((), np.float32), requires_grad=True)
        p.grad = np.ones((), np.float32)
        state = make_adam([p], lr=0.1)
        adam_step([p], state)
        assert abs(float(p.data) - (-0.1)) < 1e-6
        assert state.step_count == 1

    def test_zero_grad_leaves_params(self):
        p = Tensor(np.full((3,), 2.0, np.float32), requires_grad=True)
        p.grad = np.zeros(3, np.float32)
        state = make_adam([p], lr=0.5)
        adam_step([p], state)
        assert np.array_equal(p.data, np.full(3, 2.0, np.float32))

    def test_two_steps_match_scalar_reference(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = 0.7
        # scalar reference
        pv, m, v = 1.0, 0.0, 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            pv -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p = Tensor(np.float32(1.0), requires_grad=True)
        state = make_adam([p], lr=lr)
        for _ in range(2):
            p.grad = np.float32(g)
            adam_step([p], state)
        assert float(p.data) == pytest.approx(pv, abs=1e-7)

    def test_missing_grad(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        state = make_adam([p], lr=0.1)
        with pytest.raises(ValueError, match="missing grad"):
            adam_step([p], state)


class TestLrSchedule:
    def test_piecewise_shape(self):
        s = LrSchedule(1.0, hold_epochs=3, decay_epochs=4)
        assert [s.lr(e) for e in range(9)] == [1.0, 1.0, 1.0, 1.0, 0.75, 0.5, 0.25, 0.0, 0.0]

    def test_zero_decay_constant(self):
        s = LrSchedule(2e-4, hold_epochs=5, decay_epochs=0)
        assert all(s.lr(e) == 2e-4 for e in range(5))

    def test_nonnegative_and_zero_after_end(self):
        s = LrSchedule(0.3, 2, 3)
        for e in range(12):
            assert s.lr(e) >= 0.0
        assert s.lr(s.total_epochs) == 0.0
        assert s.lr(s.total_epochs + 5) == 0.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            LrSchedule(0.0, 1, 1)


class TestNumericGuards:
    def test_nan_aborts_forward(self):
        a = Tensor(np.array([1.0, np.inf], np.float32))
        b = Tensor(np.array([1.0, -np.inf], np.float32))
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            T.add(a, b)

    def test_overflow_to_inf_aborts(self):
        a = Tensor(np.array([3e38], np.float32))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.mul(a, a)


class TestDeterminism:
    def test_bitwise_identical_forward_and_grads(self):
        def once():
            r = np.random.default_rng(7)
            x = Tensor(r.normal(size=(2, 8, 8)).astype(np.float32))
            k = Tensor(r.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
            out = T.leaky_relu(conv2d(x, k, stride=2, padding=1))
            loss = mse_loss(out, Tensor(np.zeros_like(out.data)))
            zero_grads([k])
            backward(loss)
            return out.data.copy(), k.grad.copy()
        o1, g1 = once()
        o2, g2 = once()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)


class TestTnsrFormat:
    def test_round_trip(self, tmp_path):
        arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
        path = tmp_path / "a.tnsr"
        write_tnsr(path, arr)
        back = read_tnsr(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_scalar_and_rank1(self, tmp_path):
        for arr in (np.float32(3.5), np.arange(7, dtype=np.float32)):
            path = tmp_path / "b.tnsr"
            write_tnsr(path, np.asarray(arr))
            assert np.array_equal(read_tnsr(path), np.asarray(arr))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "c.tnsr"
        write_tnsr(path, np.ones((4, 4), np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="corrupt|truncated"):
            read_tnsr(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.tnsr"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_tnsr(path)
