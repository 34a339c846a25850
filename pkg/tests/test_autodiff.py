"""Tape engine: convolution against a naive loop, gradients against central
finite differences, replay and determinism contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misfire import (
    Conv,
    Dense,
    MaxPool,
    ModelSpec,
    ShapeError,
    Tape,
    backward,
    backward_from,
    conv2d,
    finite_diff_gradient,
    forward_record,
    init_checkpoint,
    softmax,
    tensor,
)
from misfire.autodiff import conv_output_extent
from misfire.models import forward_presoftmax


def conv2d_loops(x, k, stride, padding):
    """Reference convolution: six explicit loops over the output and kernel."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def tiny_model(seed, in_shape=(1, 6, 6), classes=3):
    spec = ModelSpec(in_shape, classes, (
        Conv(2, kernel_size=3, padding=1),
        MaxPool(2),
        Dense(classes, activation="linear"),
    ))
    return init_checkpoint(spec, seed)


class TestConv2d:
    def test_identity_kernel(self):
        out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 1, 1)))
        assert out.shape == (1, 3, 3)
        np.testing.assert_array_equal(out, np.ones((1, 3, 3)))

    def test_full_sum_kernel(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = conv2d(x, np.ones((1, 1, 2, 2)))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 10.0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        got = conv2d(x, k)
        np.testing.assert_allclose(got, conv2d_loops(x, k, 1, 0), atol=1e-12)

    @pytest.mark.parametrize("stride,padding,kh", [(1, 0, 2), (2, 1, 3), (3, 2, 3), (2, 0, 1)])
    def test_strided_padded_matches_loops(self, stride, padding, kh):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(2, 2, kh, kh))
        got = conv2d(x, k, stride=stride, padding=padding)
        want = conv2d_loops(x, k, stride, padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_output_shape_formula(self):
        for h in (4, 7, 9):
            for kh in (1, 2, 3):
                for stride in (1, 2, 3):
                    for pad in (0, 1):
                        if kh > h + 2 * pad:
                            continue
                        out = conv2d(np.zeros((1, h, h)), np.zeros((1, 1, kh, kh)),
                                     stride=stride, padding=pad)
                        want = conv_output_extent(h, kh, stride, pad)
                        assert out.shape == (1, want, want)

    def test_channel_mismatch_reports_shapes(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 2, 2)))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 4, 4)))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_batched_consistent_with_single(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 2, 5, 5))
        k = rng.normal(size=(2, 2, 3, 3))
        batched = conv2d(x, k, padding=1)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], conv2d(x[i], k, padding=1))


class TestForwardRecord:
    def test_zero_input_zero_model_propagates_zeros(self):
        ckpt = tiny_model(3)
        for name in ckpt.weights:
            if name.endswith("bias") or name.endswith(".b"):
                ckpt.weights[name][:] = 0.0
        _, acts, pres = forward_record(ckpt, np.zeros((1, 6, 6)))
        assert all(np.all(a == 0) for a in acts.values())
        np.testing.assert_array_equal(pres, np.zeros(3))

    def test_softmax_normalizes(self):
        ckpt = tiny_model(4)
        rng = np.random.default_rng(0)
        for _ in range(5):
            _, _, pres = forward_record(ckpt, rng.uniform(size=(1, 6, 6)))
            assert abs(softmax(pres).sum() - 1.0) < 1e-12

    def test_matches_hand_composition(self):
        # 1x1 conv (scale 2, bias 0.5) then linear head, done by hand
        spec = ModelSpec((1, 2, 2), 2, (
            Conv(1, kernel_size=1, padding=0, activation="linear"),
            Dense(2, activation="linear"),
        ))
        ckpt = init_checkpoint(spec, 0)
        ckpt.weights["conv1.kernels"][:] = 2.0
        ckpt.weights["conv1.bias"][:] = 0.5
        w = np.arange(8.0).reshape(4, 2)
        ckpt.weights["dense1.w"][:] = w
        ckpt.weights["dense1.b"][:] = [1.0, -1.0]
        x = np.array([[[0.1, 0.2], [0.3, 0.4]]])
        _, _, pres = forward_record(ckpt, x)
        hand = (2.0 * x.reshape(-1) + 0.5) @ w + np.array([1.0, -1.0])
        np.testing.assert_allclose(pres, hand, atol=1e-14)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            forward_record(tiny_model(1), np.zeros((1, 5, 5)))

    def test_every_conv_layer_reported(self):
        spec = ModelSpec((1, 8, 8), 2, (
            Conv(2), MaxPool(2), Conv(3), Dense(2, activation="linear"),
        ))
        _, acts, _ = forward_record(init_checkpoint(spec, 0), np.zeros((1, 8, 8)))
        assert set(acts) == {"conv1", "conv2"}

    def test_deterministic_bit_identical(self):
        ckpt = tiny_model(9)
        x = np.random.default_rng(1).uniform(size=(1, 6, 6))
        _, acts1, pres1 = forward_record(ckpt, x)
        _, acts2, pres2 = forward_record(ckpt, x)
        assert np.array_equal(pres1, pres2)
        for k in acts1:
            assert np.array_equal(acts1[k], acts2[k])

    def test_tape_replay_bit_exact(self):
        ckpt = tiny_model(11)
        x = np.random.default_rng(2).uniform(size=(1, 6, 6))
        tape, _, _ = forward_record(ckpt, x)
        for node, replayed in zip(tape.nodes, tape.replay()):
            assert np.array_equal(node.value, replayed)


class TestBackward:
    def test_linear_gradient(self):
        tape = Tape()
        x = tape.leaf([[2.0, 5.0]])
        w = tape.leaf([[3.0], [-1.0]])
        tape.name("presoftmax", tape.matmul(x, w))
        grads = backward(tape, 0)
        np.testing.assert_array_equal(grads[x], [[3.0, -1.0]])

    def test_output_index_validated(self):
        ckpt = tiny_model(2)
        tape, _, _ = forward_record(ckpt, np.zeros((1, 6, 6)))
        with pytest.raises(IndexError):
            backward(tape, 3)

    def test_relu_subgradient_zero_at_zero(self):
        tape = Tape()
        x = tape.leaf([[0.0, -1.0, 2.0]])
        tape.name("presoftmax", tape.relu(x))
        grads = backward(tape, 0)
        np.testing.assert_array_equal(grads[x], [[0.0, 0.0, 0.0]])
        grads = backward(tape, 2)
        np.testing.assert_array_equal(grads[x], [[0.0, 0.0, 1.0]])

    def test_matches_finite_differences_sweep(self):
        rng = np.random.default_rng(77)
        for trial in range(10):
            ckpt = tiny_model(trial, in_shape=(1, 6, 6))
            # keep inputs away from relu/pool kinks
            x = rng.uniform(0.05, 0.95, size=(1, 6, 6))
            c = int(rng.integers(0, 3))
            tape, _, _ = forward_record(ckpt, x)
            gx = backward(tape, c)[tape.named["input"]][0]
            fd = finite_diff_gradient(
                lambda v: float(forward_presoftmax(ckpt, v)[c]), x
            )
            denom = np.maximum(np.abs(fd), 1e-6)
            assert (np.abs(gx - fd) / denom).max() < 1e-5

    def test_weight_gradients_match_finite_differences(self):
        ckpt = tiny_model(21)
        x = np.random.default_rng(3).uniform(0.1, 0.9, size=(1, 6, 6))
        tape, _, _ = forward_record(ckpt, x)
        grads = backward(tape, 0)
        gk = grads[tape.named["conv1.kernels"]]

        def f(kern):
            trial = ckpt.copy()
            trial.weights["conv1.kernels"] = kern
            return float(forward_presoftmax(trial, x)[0])

        fd = finite_diff_gradient(f, ckpt.weights["conv1.kernels"])
        np.testing.assert_allclose(gk, fd, rtol=1e-5, atol=1e-8)

    def test_backward_from_arbitrary_seed(self):
        tape = Tape()
        x = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        w = tape.leaf([[1.0], [1.0]])
        out = tape.matmul(x, w)
        grads = backward_from(tape, {out: np.array([[1.0], [2.0]])})
        np.testing.assert_array_equal(grads[x], [[1.0, 1.0], [2.0, 2.0]])

    def test_seed_shape_checked(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward_from(tape, {x: np.zeros(3)})


class TestFiniteDiff:
    def test_sum_of_squares(self):
        g = finite_diff_gradient(lambda v: float((v ** 2).sum()), [1.0, 2.0])
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_constant_function(self):
        g = finite_diff_gradient(lambda v: 7.5, [1.0, -2.0, 3.0])
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_eps_validated(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda v: 0.0, [1.0], eps=0.0)


class TestTensor:
    def test_scalar_promoted(self):
        assert tensor(3.0).shape == (1,)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            tensor(np.zeros((2, 0)))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_and_dtype(self, values):
        t = tensor(values)
        assert t.dtype == np.float64
        assert t.shape == (len(values),)
