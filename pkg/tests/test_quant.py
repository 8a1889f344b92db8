import numpy as np
import pytest
from helpers import random_model
from hypothesis import given, settings
from hypothesis import strategies as st

from ternhybrid.errors import ConfigError, NumericError, PolicyError, StateError
from ternhybrid.intexec import Fixed, requant, shift_round, int_forward
from ternhybrid.model import analysis, serialize
from ternhybrid.model.arch import ArchSpec, build_model
from ternhybrid.model.graph import Conv2D, DenseHead, Flatten, HybridModel, collapsed, forward
from ternhybrid.quant import (
    POLICIES,
    calibrate,
    fold_batchnorm,
    get_policy,
    has_batchnorm,
    post_training_quantize,
    quant_targets,
    quantize_model,
)
from ternhybrid.tensor import BatchNorm, ConvGeometry, QFormat


def _linear_model(weight):
    weight = np.asarray(weight, float)
    return HybridModel([], DenseHead(weight, None), (1, 1, weight.shape[1]), weight.shape[0])


def _uniform_formats(model, bits=16, frac=9):
    return {name: QFormat(bits, frac) for name, _, _ in quant_targets(model)}


class TestFolding:
    def test_identity_bn_is_noop(self):
        rng = np.random.default_rng(0)
        g = ConvGeometry(3, 3, 1, 1, 1, 1, in_channels=1, out_channels=3)
        conv = Conv2D(g, rng.normal(size=g.filter_shape()), rng.normal(size=3), BatchNorm.identity(3, eps=0.0), True)
        m = HybridModel([conv, Flatten()], DenseHead(rng.normal(size=(2, 3 * 16))), (1, 4, 4), 2)
        x = rng.normal(size=(5, 1, 4, 4))
        np.testing.assert_allclose(forward(fold_batchnorm(m), x), forward(m, x), rtol=1e-6, atol=1e-7)

    def test_random_bn_pointwise(self):
        rng = np.random.default_rng(1)
        g = ConvGeometry.pointwise(3, 4)
        bn = BatchNorm(rng.uniform(0.5, 2, 4), rng.normal(size=4), rng.normal(size=4), rng.uniform(0.2, 3, 4))
        conv = Conv2D(g, rng.normal(size=g.filter_shape()), rng.normal(size=4), bn, False)
        m = HybridModel([conv, Flatten()], DenseHead(rng.normal(size=(2, 4 * 6))), (3, 2, 3), 2)
        x = rng.normal(size=(100, 3, 2, 3))
        a, b = forward(m, x), forward(fold_batchnorm(m), x)
        assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(a))

    @given(st.integers(0, 10_000))
    @settings(max_examples=15, deadline=None)
    def test_random_models(self, seed):
        m = random_model(seed, inference=True)
        if not has_batchnorm(m):
            return
        x = np.random.default_rng(seed).normal(size=(20, *m.input_shape))
        a, b = forward(m, x), forward(fold_batchnorm(m), x)
        assert np.max(np.abs(a - b)) <= 1e-5 * max(np.max(np.abs(a)), 1e-12)

    def test_fold_twice(self):
        rng = np.random.default_rng(2)
        g = ConvGeometry.pointwise(1, 2)
        conv = Conv2D(g, np.ones(g.filter_shape()), None, BatchNorm.identity(2), False)
        m = fold_batchnorm(HybridModel([conv], DenseHead(rng.normal(size=(2, 2))), (1, 1, 1), 2))
        with pytest.raises(StateError, match="no BN present"):
            fold_batchnorm(m)

    def test_nonpositive_variance(self):
        g = ConvGeometry.pointwise(1, 1)
        bn = BatchNorm([1.0], [0.0], [0.0], [-1.0], eps=1e-3)
        conv = Conv2D(g, np.ones(g.filter_shape()), None, bn, False)
        with pytest.raises(NumericError):
            fold_batchnorm(HybridModel([conv], DenseHead(np.ones((2, 1))), (1, 1, 1), 2))

    def test_strassen_requires_collapse(self):
        m = build_model(ArchSpec.from_file("hybrid.cfg"))
        with pytest.raises(StateError):
            fold_batchnorm(m)


class TestCalibration:
    def test_unit_range_prefers_finest(self):
        rng = np.random.default_rng(0)
        m = _linear_model(rng.uniform(-0.9, 0.9, (3, 6)))
        x = rng.uniform(-0.9, 0.9, (40, 1, 1, 6))
        y = np.argmax(forward(m, x), axis=1)
        fmt = calibrate(m, x, y, "int8")
        assert fmt["head.weight"] == QFormat(8, 7)
        assert fmt["input"] == QFormat(8, 7)

    def test_range_four(self):
        rng = np.random.default_rng(1)
        m = _linear_model(rng.uniform(-0.9, 0.9, (3, 6)))
        x = rng.uniform(-3.9, 3.9, (40, 1, 1, 6))
        y = np.argmax(forward(m, x), axis=1)
        assert calibrate(m, x, y, "int8")["input"] == QFormat(8, 5)
        assert calibrate(m, x, y, "int16")["input"] == QFormat(16, 13)

    def test_single_sample(self):
        m = collapsed(random_model(5, inference=True))
        if has_batchnorm(m):
            m = fold_batchnorm(m)
        x = np.random.default_rng(0).normal(size=(1, *m.input_shape))
        fmt = calibrate(m, x, [0], "mixed")
        assert set(fmt) == {n for n, _, _ in quant_targets(m)}

    def test_deterministic(self):
        m = _linear_model(np.random.default_rng(2).normal(size=(2, 3)))
        x = np.random.default_rng(3).normal(size=(10, 1, 1, 3))
        y = np.zeros(10, int)
        assert calibrate(m, x, y) == calibrate(m, x, y)

    def test_errors(self):
        m = _linear_model(np.ones((2, 3)))
        with pytest.raises(ConfigError):
            calibrate(m, np.zeros((0, 1, 1, 3)), [])
        with pytest.raises(PolicyError):
            get_policy("int4")
        with pytest.raises(PolicyError):
            quantize_model(m, {})

    def test_policies(self):
        assert POLICIES["mixed"].bits_for("layers.1.h", "act", True) == 16
        assert POLICIES["mixed"].bits_for("layers.0.out", "act", False) == 8
        assert POLICIES["mixed"].bits_for("layers.0.a_hat", "a_hat", False) == 16
        assert POLICIES["int8"].bits_for("layers.0.a_hat", "a_hat", False) == 8


class TestQuantizedModel:
    @given(st.integers(0, 10_000), st.sampled_from(["soft", "hard"]))
    @settings(max_examples=25, deadline=None)
    def test_integer_executor_bit_exact(self, seed, tree_mode):
        m = random_model(seed, inference=True)
        m.tree_mode = tree_mode
        if has_batchnorm(m):
            m = fold_batchnorm(m)
        q = quantize_model(m, _uniform_formats(m))
        x = np.random.default_rng(seed).normal(size=(6, *m.input_shape))
        np.testing.assert_array_equal(int_forward(q, x), forward(q, x))

    def test_serialized_roundtrip(self):
        m = random_model(11, inference=True)
        if has_batchnorm(m):
            m = fold_batchnorm(m)
        q = quantize_model(m, _uniform_formats(m, 8, 4))
        back = serialize.from_bytes(serialize.to_bytes(q))
        assert back.qspec == q.qspec
        x = np.random.default_rng(0).normal(size=(3, *m.input_shape))
        np.testing.assert_array_equal(forward(back, x), forward(q, x))

    def test_size_shrinks_with_bits(self):
        m = random_model(21, inference=True)
        if has_batchnorm(m):
            m = fold_batchnorm(m)
        sizes = [analysis.model_size(quantize_model(m, _uniform_formats(m, b, 3))).total_bytes for b in (32, 16, 8)]
        assert analysis.model_size(m).total_bytes >= sizes[0] > sizes[1] > sizes[2]

    def test_zero_weights(self):
        m = _linear_model(np.zeros((3, 4)))
        x = np.random.default_rng(0).normal(size=(5, 1, 1, 4))
        q = post_training_quantize(m, x, np.zeros(5, int))
        np.testing.assert_array_equal(forward(q, x), 0.0)
        np.testing.assert_array_equal(int_forward(q, x), 0.0)

    def test_unfolded_rejected(self):
        g = ConvGeometry.pointwise(1, 2)
        conv = Conv2D(g, np.ones(g.filter_shape()), None, BatchNorm.identity(2), False)
        m = HybridModel([conv], DenseHead(np.ones((2, 2))), (1, 1, 1), 2)
        with pytest.raises(StateError):
            calibrate(m, np.ones((2, 1, 1, 1)), [0, 1])


class TestIntegerArithmetic:
    def test_shift_round_half_even(self):
        v = np.array([5, 6, 7, -5, -6, -7, 4, 12])
        # divide by 4: 1.25 1.5 1.75 -1.25 -1.5 -1.75 1 3
        np.testing.assert_array_equal(shift_round(v, -2), [1, 2, 2, -1, -2, -2, 1, 3])
        np.testing.assert_array_equal(shift_round(np.array([3]), 2), [12])

    @given(st.lists(st.integers(-(1 << 40), 1 << 40), min_size=1, max_size=20), st.integers(1, 20))
    def test_shift_round_matches_rint(self, vals, k):
        v = np.array(vals, dtype=np.int64)
        np.testing.assert_array_equal(shift_round(v, -k), np.rint(v / 2.0**k).astype(np.int64))

    def test_requant_saturates(self):
        out = requant(Fixed(np.array([1 << 20, -(1 << 20)]), 4), QFormat(8, 2))
        np.testing.assert_array_equal(out.v, [127, -128])
