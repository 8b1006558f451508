"""Tensor op forward results against independent oracles, plus serialization."""

import io

import numpy as np
import pytest

from uharmony import ops
from uharmony.errors import ConfigurationError
from uharmony.tensor import (
    GradTape,
    Tensor,
    load_tensor,
    read_array,
    save_tensor,
    write_array,
)
from uharmony import kernels


def naive_conv3d(x, k, stride=1, padding=0):
    """Six-nested-loop cross-correlation oracle. Deliberately dumb and slow."""
    b, ci, h, w, d = x.shape
    co, _, ks, _, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
    ho = (h + 2 * padding - ks) // stride + 1
    wo = (w + 2 * padding - ks) // stride + 1
    do = (d + 2 * padding - ks) // stride + 1
    out = np.zeros((b, co, ho, wo, do), dtype=x.dtype)
    for bi in range(b):
        for oc in range(co):
            for i in range(ho):
                for j in range(wo):
                    for l in range(do):
                        acc = 0.0
                        for ic in range(ci):
                            patch = xp[
                                bi, ic,
                                i * stride : i * stride + ks,
                                j * stride : j * stride + ks,
                                l * stride : l * stride + ks,
                            ]
                            acc += float((patch * k[oc, ic]).sum())
                        out[bi, oc, i, j, l] = acc
    return out


class TestConv3d:
    def test_all_ones_sums_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = ops.conv3d(x, k)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.data.flat[0] == pytest.approx(27.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 1, 5, 6, 4)))
        k = np.zeros((1, 1, 3, 3, 3))
        k[0, 0, 1, 1, 1] = 1.0
        out = ops.conv3d(x, Tensor(k), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3, 3))
        got = ops.conv3d(Tensor(x), Tensor(k)).data
        want = naive_conv3d(x, k)
        np.testing.assert_allclose(got, want, atol=1e-10)

    @pytest.mark.parametrize("backend", ["numpy", "torch"])
    def test_random_configs_match_oracle(self, backend):
        if backend == "torch" and not kernels._HAVE_TORCH:
            pytest.skip("torch not available")
        rng = np.random.default_rng(11)
        old = kernels.get_conv_backend()
        kernels.set_conv_backend(backend)
        try:
            for _ in range(50):
                ci = int(rng.integers(1, 3))
                co = int(rng.integers(1, 4))
                ks = int(rng.choice([1, 3]))
                stride = int(rng.choice([1, 2]))
                padding = int(rng.integers(0, 2))
                sp = [int(rng.integers(ks, ks + 4)) for _ in range(3)]
                x = rng.standard_normal((1, ci, *sp))
                k = rng.standard_normal((co, ci, ks, ks, ks))
                got = ops.conv3d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
                want = naive_conv3d(x, k, stride=stride, padding=padding)
                np.testing.assert_allclose(got, want, atol=1e-10)
        finally:
            kernels.set_conv_backend(old)

    def test_output_extent_formula(self):
        x = Tensor(np.zeros((1, 1, 9, 8, 7)))
        k = Tensor(np.zeros((2, 1, 3, 3, 3)))
        out = ops.conv3d(x, k, stride=2, padding=1)
        want = tuple((n + 2 * 1 - 3) // 2 + 1 for n in (9, 8, 7))
        assert out.shape[2:] == want

    def test_channel_mismatch_raises_with_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4, 4)))
        k = Tensor(np.zeros((1, 3, 3, 3, 3)))
        with pytest.raises(ConfigurationError, match=r"\(1, 2, 4, 4, 4\).*\(1, 3, 3, 3, 3\)"):
            ops.conv3d(x, k)

    def test_backends_agree_float32(self):
        if not kernels._HAVE_TORCH:
            pytest.skip("torch not available")
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 3, 8, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
        old = kernels.get_conv_backend()
        try:
            kernels.set_conv_backend("numpy")
            a = ops.conv3d(Tensor(x), Tensor(k), padding=1).data
            kernels.set_conv_backend("torch")
            b = ops.conv3d(Tensor(x), Tensor(k), padding=1).data
        finally:
            kernels.set_conv_backend(old)
        np.testing.assert_allclose(a, b, rtol=2e-5, atol=2e-5)


class TestReduceSpatial:
    def test_constant_volume(self):
        x = Tensor(np.full((2, 3, 4, 4, 4), 5.0))
        assert np.allclose(ops.reduce_spatial(x, "mean").data, 5.0)
        assert np.allclose(ops.reduce_spatial(x, "var").data, 0.0)

    def test_hand_values(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 4))
        assert ops.reduce_spatial(x, "mean").data.flat[0] == pytest.approx(2.5)
        # population variance: divide by |P|, not |P|-1
        assert ops.reduce_spatial(x, "var").data.flat[0] == pytest.approx(1.25)

    def test_zero_volume(self):
        x = Tensor(np.zeros((1, 2, 3, 3, 3)))
        assert np.all(ops.reduce_spatial(x, "mean").data == 0)
        assert np.all(ops.reduce_spatial(x, "var").data == 0)


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax(Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-12)

    def test_large_magnitude_stable(self):
        out = ops.softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-12)

    def test_direct_evaluation(self):
        # exp([1,2,3]) / sum, computed independently
        e = np.exp(np.array([1.0, 2.0, 3.0]))
        out = ops.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, e / e.sum(), atol=1e-12)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_sums_to_one_up_to_1e4(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mag = rng.choice([1.0, 10.0, 1e2, 1e4])
            x = rng.standard_normal((4, 7)) * mag
            s = ops.softmax(Tensor(x)).data.sum(axis=-1)
            np.testing.assert_allclose(s, 1.0, atol=1e-9)


class TestPlumbingOps:
    def test_upsample_downsample_shapes(self):
        x = Tensor(np.arange(2 * 3 * 4 * 4 * 4, dtype=np.float64).reshape(2, 3, 4, 4, 4))
        up = ops.upsample2(x)
        assert up.shape == (2, 3, 8, 8, 8)
        # nearest neighbor: each voxel replicated into a 2x2x2 block
        assert np.all(up.data[:, :, ::2, ::2, ::2] == x.data)
        down = ops.downsample2(x)
        np.testing.assert_array_equal(down.data, x.data[:, :, ::2, ::2, ::2])

    def test_concat_and_slice_channels(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
        b = Tensor(rng.standard_normal((1, 3, 3, 3, 3)))
        cat = ops.concat_channels(a, b)
        assert cat.shape == (1, 5, 3, 3, 3)
        sl = ops.slice_channels(cat, [0, 3])
        np.testing.assert_array_equal(sl.data[:, 0], a.data[:, 0])
        np.testing.assert_array_equal(sl.data[:, 1], b.data[:, 1])

    def test_global_avg_pool(self):
        x = np.random.default_rng(1).standard_normal((2, 4, 3, 3, 3))
        got = ops.global_avg_pool(Tensor(x)).data
        np.testing.assert_allclose(got, x.mean(axis=(2, 3, 4)), atol=1e-14)

    def test_adapt_modalities(self):
        x = Tensor(np.ones((1, 2, 4, 4, 4)))
        out = ops.adapt_modalities(x, 4)
        assert out.shape == (1, 8, 4, 4, 4)
        np.testing.assert_array_equal(out.data[:, :2], x.data)
        assert np.all(out.data[:, 2:4] == 0)  # missing modalities zero-filled
        assert np.all(out.data[:, 4:6] == 1)  # presence indicators
        assert np.all(out.data[:, 6:8] == 0)
        with pytest.raises(ConfigurationError):
            ops.adapt_modalities(Tensor(np.ones((1, 5, 4, 4, 4))), 4)

    def test_mixed_dtypes_rejected(self):
        a = Tensor(np.zeros(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float64))
        with pytest.raises(ConfigurationError):
            ops.add(a, b)


class TestTapeBasics:
    def test_reuse_accumulates(self):
        # y = x*x + x -> dy/dx = 2x + 1
        x = Tensor(np.array([3.0]), requires_grad=True)
        with GradTape() as tape:
            y = ops.add(ops.mul(x, x), x)
        tape.backward(y)
        assert x.grad[0] == pytest.approx(7.0)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = ops.mul(x, x)
        assert y.data[0] == 1.0
        assert x.grad is None

    def test_mean_backward_uniform(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
        with GradTape() as tape:
            m = ops.reduce_spatial(x, "mean")
        tape.backward(m)
        np.testing.assert_allclose(x.grad, 1.0 / 27, atol=1e-15)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(4)
        for dtype in (np.float32, np.float64):
            arr = rng.standard_normal((2, 3, 4)).astype(dtype)
            buf = io.BytesIO()
            write_array(buf, arr)
            buf.seek(0)
            back = read_array(buf)
            assert back.dtype == arr.dtype
            np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        arr = np.zeros((2, 5), dtype=np.float32)
        buf = io.BytesIO()
        write_array(buf, arr)
        raw = buf.getvalue()
        assert raw[:6] == b"UHTEN1"
        assert raw[6] == 0  # dtype byte: float32
        assert raw[7] == 2  # rank
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 5

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "t.bin"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ConfigurationError):
            load_tensor(p)

    def test_file_round_trip(self, tmp_path):
        arr = np.random.default_rng(9).standard_normal((3, 2, 2))
        p = tmp_path / "t.uhten"
        save_tensor(p, arr)
        np.testing.assert_array_equal(load_tensor(p), arr)
