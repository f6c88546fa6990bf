import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from featmod.tensors import (
    ConfigError,
    NumericError,
    ShapeError,
    count_macs,
    depthwise_conv1d,
    load_tensors,
    make_rng,
    matmul,
    save_tensors,
    sinusoid_positions,
    softmax_lastdim,
    swish,
)


def matmul_reference(a, b):
    """Triple-loop oracle."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv_reference(x, kernel):
    """Naive sliding-window oracle with zero padding."""
    channels, length = x.shape
    k = kernel.shape[1]
    pad = k // 2
    out = np.zeros_like(x)
    for c in range(channels):
        for i in range(length):
            acc = 0.0
            for j in range(k):
                src = i + j - pad
                if 0 <= src < length:
                    acc += x[c, src] * kernel[c, j]
            out[c, i] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_matches_triple_loop(self):
        rng = make_rng(0)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        assert np.max(np.abs(matmul(a, b) - matmul_reference(a, b))) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rejects_nonfinite_result(self):
        big = np.full((2, 2), 1e308)
        with pytest.raises(NumericError):
            matmul(big, big)

    def test_associativity(self):
        rng = make_rng(1)
        for _ in range(8):
            a, b, c = (rng.normal(size=(8, 8)) for _ in range(3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = np.max(np.abs(left - right)) / np.max(np.abs(left))
            assert rel < 1e-9


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax_lastdim(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_direct_evaluation(self):
        out = softmax_lastdim(np.array([1.0, 2.0]))
        assert np.allclose(out, [0.26894, 0.73106], atol=1e-5)

    def test_large_magnitudes_no_overflow(self):
        out = softmax_lastdim(np.array([1000.0, 1000.0]))
        assert np.array_equal(out, [0.5, 0.5])

    def test_masked_logits_become_exact_zero(self):
        out = softmax_lastdim(np.array([0.3, -np.inf, 0.7]))
        assert out[1] == 0.0

    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=16))
    def test_rows_sum_to_one(self, row):
        out = softmax_lastdim(np.array(row))
        assert abs(out.sum() - 1.0) <= 1e-6
        assert np.all(out >= 0.0)


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self):
        rng = make_rng(2)
        x = rng.normal(size=(3, 9))
        kernel = np.tile(np.array([0.0, 1.0, 0.0]), (3, 1))
        assert np.allclose(depthwise_conv1d(x, kernel), x)

    def test_hand_convolution(self):
        out = depthwise_conv1d(np.array([[1.0, 2.0, 3.0]]), np.array([[1.0, 1.0, 1.0]]))
        assert np.array_equal(out, [[3.0, 6.0, 5.0]])

    def test_matches_sliding_window(self):
        rng = make_rng(3)
        x = rng.normal(size=(4, 11))
        kernel = rng.normal(size=(4, 5))
        assert np.max(np.abs(depthwise_conv1d(x, kernel) - conv_reference(x, kernel))) < 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            depthwise_conv1d(np.zeros((1, 4)), np.zeros((1, 2)))

    @given(st.integers(min_value=0, max_value=2**31))
    def test_linearity(self, seed):
        rng = make_rng(seed)
        x = rng.normal(size=(2, 7))
        y = rng.normal(size=(2, 7))
        kernel = rng.normal(size=(2, 3))
        a, b = rng.normal(size=2)
        combined = depthwise_conv1d(a * x + b * y, kernel)
        split = a * depthwise_conv1d(x, kernel) + b * depthwise_conv1d(y, kernel)
        assert np.max(np.abs(combined - split)) < 1e-10


class TestSwish:
    def test_zero(self):
        assert swish(np.array(0.0)) == 0.0

    def test_one(self):
        assert np.isclose(swish(np.array(1.0)), 0.73106, atol=1e-5)

    def test_deep_negative_saturates_from_below(self):
        val = float(swish(np.array(-20.0)))
        assert np.isclose(val, -4.122e-8, rtol=1e-3)
        assert val < 0


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a = make_rng(1234).normal(size=10_000)
        b = make_rng(1234).normal(size=10_000)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_rng(1).normal(size=16), make_rng(2).normal(size=16))


class TestMacCounting:
    def test_matmul_macs(self):
        with count_macs() as counter:
            matmul(np.zeros((3, 4)), np.zeros((4, 5)))
        assert counter.macs == 3 * 4 * 5
        assert counter.flops == 2 * 3 * 4 * 5

    def test_conv_macs(self):
        with count_macs() as counter:
            depthwise_conv1d(np.zeros((2, 7)), np.zeros((2, 3)))
        assert counter.macs == 2 * 7 * 3

    def test_disarmed_outside_context(self):
        with count_macs() as counter:
            pass
        matmul(np.zeros((2, 2)), np.zeros((2, 2)))
        assert counter.macs == 0


class TestSinusoid:
    def test_position_zero(self):
        row = sinusoid_positions([0], 8)[0]
        assert np.array_equal(row[0::2], np.zeros(4))
        assert np.array_equal(row[1::2], np.ones(4))

    def test_odd_dim(self):
        assert sinusoid_positions([0, 1, 2], 5).shape == (3, 5)


class TestManifest:
    def test_round_trip(self, tmp_path):
        rng = make_rng(4)
        named = {
            "a.weight": rng.normal(size=(3, 4)),
            "b.bias": rng.normal(size=7),
            "c.single": rng.normal(size=(2, 2)).astype(np.float32),
        }
        path = tmp_path / "weights.manifest"
        save_tensors(path, named)
        loaded = load_tensors(path)
        assert list(loaded) == list(named)
        for name in named:
            assert loaded[name].dtype == named[name].dtype
            assert np.array_equal(loaded[name], named[name])

    def test_manifest_format(self, tmp_path):
        path = tmp_path / "t.manifest"
        save_tensors(path, {"x": np.zeros((2, 3))})
        assert path.read_text() == "x shape=2x3 dtype=f64\n"
        assert (tmp_path / "t.bin").stat().st_size == 2 * 3 * 8

    def test_malformed_manifest_rejected(self, tmp_path):
        path = tmp_path / "bad.manifest"
        path.write_text("oops\n")
        path.with_suffix(".bin").write_bytes(b"")
        with pytest.raises(ConfigError):
            load_tensors(path)
