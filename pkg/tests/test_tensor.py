import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ternhybrid import opcount
from ternhybrid.errors import FormatError, ShapeError
from ternhybrid.tensor import (
    KIND_FLOAT32,
    KIND_TERNARY,
    BatchNorm,
    ConvGeometry,
    QFormat,
    QuantSim,
    as_f32,
    conv2d_ref,
    decode_blob,
    encode_blob,
    fx_dequantize,
    fx_quantize,
    fx_round,
    im2col,
    matmul_ref,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


class TestQFormat:
    def test_bounds(self):
        q = QFormat(8, 3)
        assert (q.int_min, q.int_max) == (-128, 127)
        assert q.step == 0.125
        assert q.max_value == 127 / 8 and q.min_value == -16.0

    @pytest.mark.parametrize("bits,frac", [(7, 0), (8, 8), (16, -1), (32, 32)])
    def test_invalid(self, bits, frac):
        with pytest.raises(ValueError):
            QFormat(bits, frac)

    def test_round_half_even_and_saturation(self):
        q = QFormat(8, 1)
        x = np.array([0.25, 0.75, -0.25, 100.0, -100.0])
        np.testing.assert_array_equal(fx_quantize(x, q).values, [0, 2, 0, 127, -128])
        np.testing.assert_array_equal(fx_round(x, q), [0.0, 1.0, 0.0, 63.5, -64.0])

    @given(arrays(np.float64, st.integers(1, 30), elements=finite), st.sampled_from([8, 16, 32]), st.data())
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_within_half_step(self, x, bits, data):
        q = QFormat(bits, data.draw(st.integers(0, bits - 1)))
        inside = np.clip(x, q.min_value, q.max_value)
        back = fx_dequantize(fx_quantize(inside, q)).astype(np.float64)
        # float32 dequantization adds at most one float32 ulp of the value
        tol = q.step / 2 + np.abs(inside) * 2.0**-23
        assert np.all(np.abs(back - inside) <= tol)

    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    @settings(max_examples=40, deadline=None)
    def test_fx_round_idempotent(self, x):
        q = QFormat(16, 7)
        once = fx_round(x, q)
        np.testing.assert_array_equal(fx_round(once, q), once)


class TestConv:
    def test_matches_direct_loops(self):
        rng = np.random.default_rng(0)
        g = ConvGeometry(3, 2, 2, 1, 1, 0, in_channels=2, out_channels=3)
        x = rng.normal(size=(2, 7, 5))
        f = rng.normal(size=g.filter_shape())
        out = conv2d_ref(x, f, g)
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
        oh, ow = g.output_hw(7, 5)
        ref = np.zeros((3, oh, ow))
        for o in range(3):
            for i in range(oh):
                for j in range(ow):
                    ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, j : j + 2] * f[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_depthwise_is_per_channel(self):
        rng = np.random.default_rng(1)
        g = ConvGeometry(3, 3, pad_h=1, pad_w=1, in_channels=4, out_channels=4, depthwise=True)
        x = rng.normal(size=(4, 6, 6))
        f = rng.normal(size=g.filter_shape())
        out = conv2d_ref(x, f, g)
        for c in range(4):
            gc = ConvGeometry(3, 3, pad_h=1, pad_w=1)
            np.testing.assert_allclose(out[c], conv2d_ref(x[c : c + 1], f[c : c + 1], gc)[0], atol=1e-12)

    def test_im2col_product_equals_conv(self):
        rng = np.random.default_rng(2)
        g = ConvGeometry(2, 3, 1, 2, 1, 1, in_channels=3, out_channels=4)
        x = rng.normal(size=(2, 3, 6, 7))
        f = rng.normal(size=g.filter_shape())
        cols = im2col(x, g)
        oh, ow = g.output_hw(6, 7)
        out = (f.reshape(4, -1) @ cols).reshape(2, 4, oh, ow)
        np.testing.assert_allclose(out, conv2d_ref(x, f, g), atol=1e-12)

    def test_macs_recorded(self):
        g = ConvGeometry(3, 3, in_channels=2, out_channels=5)
        with opcount.counting() as c:
            conv2d_ref(np.ones((2, 6, 6)), np.ones(g.filter_shape()), g)
        assert c.total.macs == 4 * 4 * 18 * 5

    def test_shape_errors(self):
        g = ConvGeometry(3, 3, in_channels=2, out_channels=2)
        with pytest.raises(ShapeError):
            conv2d_ref(np.ones((3, 5, 5)), np.ones(g.filter_shape()), g)
        with pytest.raises(ShapeError):
            conv2d_ref(np.ones((2, 2, 2)), np.ones(g.filter_shape()), g)
        with pytest.raises(ShapeError):
            matmul_ref(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            ConvGeometry(3, 3, in_channels=3, out_channels=4, depthwise=True)


class TestBlobs:
    @pytest.mark.parametrize("kind", [KIND_FLOAT32, KIND_TERNARY, 8, 16, 32])
    def test_roundtrip(self, kind):
        rng = np.random.default_rng(3)
        a = rng.integers(-1, 2, size=(3, 5)) if kind != KIND_FLOAT32 else rng.normal(size=(3, 5)).astype(np.float32)
        buf = encode_blob(a, kind)
        back, k, end = decode_blob(buf)
        assert k == kind and end == len(buf)
        np.testing.assert_array_equal(back, a)

    def test_truncation_reports_offset(self):
        buf = encode_blob(np.ones((4, 4), np.float32), KIND_FLOAT32)
        with pytest.raises(FormatError) as err:
            decode_blob(buf[:-3])
        assert err.value.offset == 2 + 8
        with pytest.raises(FormatError):
            decode_blob(b"\x09\x01")


class TestBatchNorm:
    def test_scale_shift(self):
        bn = BatchNorm([2.0], [1.0], [0.5], [3.0], eps=1.0)
        x = np.array([[[[1.5]]]])
        assert bn.apply(x)[0, 0, 0, 0] == pytest.approx(2.0 * (1.5 - 0.5) / 2.0 + 1.0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            BatchNorm(np.ones(2), np.ones(3), np.zeros(2), np.ones(2))

    def test_stored_as_float32(self):
        bn = BatchNorm([0.1], [0.2], [0.3], [0.4])
        assert bn.gamma[0] == as_f32(0.1)[()]


class TestQuantSim:
    def test_inactive_is_identity(self):
        q = QuantSim()
        x = np.array([0.123456789])
        assert q.weight("w", x) is x and q.acc(x, 3) is x

    def test_child_prefix_and_saturation(self):
        q = QuantSim({"head.w": QFormat(8, 2)}, acc_bits=8)
        h = q.child("head.")
        assert h.frac("w") == 2 and h.frac("v") is None
        np.testing.assert_array_equal(h.acc(np.array([100.0, -100.0]), 2), [127 / 4, -128 / 4])
