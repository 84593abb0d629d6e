import math

import numpy as np
import pytest

from conftest import folded, quantized
from errors import InternalError, InvalidValueError, QuantArtifactError, ShapeError
from int_runtime import (AttentionParams, attention_int, dequantize_output, forward_int, int_conv2d, int_matmul,
                         lod, log2_round, log2_round_array, log2_round_nearest, lower, quantize_divisor_log2,
                         requantize, requantize_array)
from model_graph import forward_float, relu_linear_attention
from quant_engine import QuantPolicy
from tensor_core import DType, correlate


def identity_attention(**overrides):
    """Scales under which one token with q = k = 128 and d = 4 returns V unchanged"""
    kwargs = dict(s_q=1 / 128, s_k=1 / 128, s_v=1 / 64, s_kv=1 / 64, s_ksum=1 / 128, s_out=1 / 64,
                  num_max=7.9375, den_max=4.0, clip=(-8, 7), rounding='nearest', dividend_bits=16,
                  divisor='log2-4', e_center=-5)
    kwargs.update(overrides)
    return AttentionParams(**kwargs)


def crosscheck(graph, qmodel, count, seed=0):
    model = lower(graph, qmodel)
    rng = np.random.default_rng(seed)
    for _ in range(count):
        x = rng.standard_normal((1,) + graph.input_shape)
        result = forward_int(graph, qmodel, model.quantize_input(x), crosscheck=True, model=model)
        assert result.crosscheck['bit_exact'], result.crosscheck['mismatches']


class TestLog2Rounding:
    def test_examples(self):
        assert lod(99) == 6
        assert log2_round(99) == 7
        assert log2_round_nearest(99) == 7
        assert log2_round(4) == 2
        assert log2_round(1) == 0

    def test_lod_rejects_non_positive(self):
        with pytest.raises(InvalidValueError):
            lod(0)

    def test_nearest_within_half_octave(self):
        x = np.arange(1, (1 << 20) + 1, dtype=np.int64)
        r = log2_round_array(x, 'nearest')
        assert np.all(np.abs(np.log2(x) - r) <= 0.5)

    def test_literal_rule_is_floor_or_ceil(self):
        x = np.arange(1, (1 << 20) + 1, dtype=np.int64)
        r = log2_round_array(x, 'lod')
        i = np.floor(np.log2(x)).astype(np.int64)
        assert np.all((r == i) | (r == i + 1))
        # rounds up from 1.5 * 2^i
        assert np.array_equal(r == i + 1, (i > 0) & (2 * x >= 3 * (np.int64(1) << i)))

    def test_scalar_and_vector_agree(self, rng):
        x = rng.integers(1, 1 << 30, size=200)
        assert [log2_round(int(v)) for v in x] == log2_round_array(x, 'lod').tolist()
        assert [log2_round_nearest(int(v)) for v in x] == log2_round_array(x, 'nearest').tolist()

    def test_unknown_mode(self):
        with pytest.raises(InvalidValueError):
            log2_round_array(np.array([3]), 'ceil')


class TestDivisorQuantization:
    def test_examples(self):
        div = quantize_divisor_log2(np.array([0, 1, 99, 1 << 20]), e_s=-3, clip=(-8, 7))
        assert div.exponents.tolist() == [-8, -3, 4, 7]
        assert div.zero_count == 1

    def test_clamps_low(self):
        assert quantize_divisor_log2(np.array([1]), e_s=-20).exponents.tolist() == [-8]

    def test_rejects_negative(self):
        with pytest.raises(InvalidValueError):
            quantize_divisor_log2(np.array([4, -1]), e_s=0)


class TestRequantize:
    def test_examples(self):
        assert requantize(np.array([100]), (49152, 17)).data.tolist() == [38]
        assert requantize(np.array([1000]), (49152, 17)).data.tolist() == [127]
        assert requantize(np.array([-1000]), (49152, 17)).data.tolist() == [-128]

    def test_half_to_even(self):
        out = requantize(np.array([5, 7, -5, -7, 3]), (32768, 16))
        assert out.data.tolist() == [2, 4, -2, -4, 2]

    def test_unsigned_target(self):
        out = requantize(np.array([-10, 300]), (32768, 15), signed=False)
        assert out.dtype is DType.U8
        assert out.data.tolist() == [0, 255]

    def test_left_shift(self):
        assert requantize_array(np.array([3]), 3, -2).tolist() == [36]

    def test_monotone(self):
        acc = np.arange(-5000, 5001)
        out = requantize(acc, (40000, 19)).data
        assert np.all(np.diff(out.astype(np.int64)) >= 0)

    def test_saturation_counter(self):
        counters = {}
        requantize_array(np.array([10, 1000, -1000]), 32768, 15, counters=counters)
        assert counters['saturated'] == 2

    @pytest.mark.parametrize("b", [0, 1 << 16])
    def test_numerator_range(self, b):
        with pytest.raises(InvalidValueError):
            requantize(np.array([1]), (b, 4))


class TestIntegerKernels:
    def test_all_ones_conv(self):
        out = int_conv2d(np.ones((1, 1, 3, 3), dtype=np.int8), np.ones((1, 1, 3, 3), dtype=np.int8), bias=[5])
        assert out.dtype is DType.I32
        assert out.data.tolist() == [[[[14]]]]

    def test_extreme_operands_fit(self):
        out = int_conv2d(np.full((1, 1, 3, 3), -128), np.full((1, 1, 3, 3), -128))
        assert out.data[0, 0, 0, 0] == 128 * 128 * 9

    def test_matches_float_correlation(self, rng):
        x = rng.integers(-128, 128, size=(1, 6, 7, 7))
        w = rng.integers(-128, 128, size=(6, 1, 3, 3))
        out = int_conv2d(x, w, stride=2, padding=1, groups=6)
        ref = correlate(x.astype(np.float64), w.astype(np.float64), 2, 1, 6)
        np.testing.assert_array_equal(out.data, ref.astype(np.int64))

    def test_rejects_wide_operands(self):
        with pytest.raises(InvalidValueError):
            int_conv2d(np.ones((1, 1, 3, 3)), np.full((1, 1, 3, 3), 200))

    def test_accumulator_bound(self):
        with pytest.raises(InternalError):
            int_conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), bias=[1 << 31])

    def test_matmul(self):
        out = int_matmul(np.array([[1, 2], [3, 4]]), np.array([[5, 6], [7, 8]]), bias=[1, -1])
        assert out.data.tolist() == [[20, 21], [44, 49]]

    def test_matmul_shapes(self):
        with pytest.raises(ShapeError):
            int_matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestAttentionInt:
    def test_single_token_returns_v(self):
        q = np.full((1, 4), 128)
        v = np.array([[-127, 5, 0, 64]])
        out = attention_int(q, q, v, identity_attention())
        assert out.dtype is DType.I8
        np.testing.assert_array_equal(out.data, v)

    def test_zero_divisors_are_counted(self, rng):
        q = np.zeros((3, 4), dtype=np.int64)
        k = rng.integers(0, 256, size=(3, 4))
        v = rng.integers(-128, 128, size=(3, 4))
        diagnostics = {}
        out = attention_int(q, k, v, identity_attention(), diagnostics)
        assert diagnostics['zero_divisors'] == 3
        np.testing.assert_array_equal(out.data, 0)

    def test_deterministic(self, rng):
        q, k = rng.integers(0, 256, size=(2, 16, 8)), rng.integers(0, 256, size=(2, 16, 8))
        v = rng.integers(-128, 128, size=(2, 16, 8))
        params = identity_attention()
        assert attention_int(q, k, v, params) == attention_int(q, k, v, params)

    def test_negative_query(self):
        with pytest.raises(InvalidValueError):
            attention_int(np.full((2, 4), -1), np.ones((2, 4)), np.ones((2, 4)), identity_attention())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            attention_int(np.ones((2, 4)), np.ones((3, 4)), np.ones((2, 4)), identity_attention())

    def test_tracks_float_attention(self):
        rng = np.random.default_rng(7)
        s_q = s_k = 1 / 255
        s_v = 1 / 127
        for _ in range(200):
            q, k = rng.integers(32, 256, size=(2, 4, 4))
            v = rng.integers(-127, 128, size=(4, 4))
            qf, kf, vf = q * s_q, k * s_k, v * s_v
            ref = relu_linear_attention(qf, kf, vf).data.astype(np.float64)
            kv, ksum = kf.T @ vf, kf.sum(axis=0)
            num, den = qf @ kv, qf @ ksum
            s_kv, s_ksum = np.abs(kv).max() / 127, ksum.max() / 255
            s_out = 2 * np.abs(ref).max() / 127
            params = AttentionParams(s_q, s_k, s_v, s_kv, s_ksum, s_out,
                                     num_max=np.abs(num).max() + 2.2 * s_kv, den_max=den.max(),
                                     e_center=math.ceil(math.log2(den.max())) - 6)
            out = attention_int(q, k, v, params).data * s_out
            # kv / ksum requantization moves num and den, then the divisor is off by at most half an octave
            qsum = qf.sum(axis=1, keepdims=True)
            d_num, d_den = 0.55 * s_kv * qsum, 0.55 * s_ksum * qsum
            drift = (d_num + np.abs(ref) * d_den) / (den[:, None] - d_den)
            bound = drift + (2 ** 0.5 - 1) * (np.abs(ref) + drift) + 1.5 * s_out
            assert np.all(np.abs(out - ref) <= bound)

    def test_uniform_divisor_needs_scale(self):
        with pytest.raises(QuantArtifactError):
            identity_attention(divisor='uniform8')


class TestForwardInt:
    def test_mbconv_bit_exact(self, toy_mbconv, toy_mbconv_quant):
        crosscheck(toy_mbconv, toy_mbconv_quant[1], 100)

    def test_msa_bit_exact(self, toy_msa, toy_msa_quant):
        crosscheck(toy_msa, toy_msa_quant[1], 100)

    def test_full_model_bit_exact(self, toy_effvit, toy_effvit_quant):
        crosscheck(toy_effvit, toy_effvit_quant[1], 5)

    @pytest.mark.parametrize("policy", [QuantPolicy(divisor='uniform8'), QuantPolicy(log2_rounding='lod'),
                                        QuantPolicy(migration=False, shifting=False)])
    def test_variants_bit_exact(self, toy_msa, toy_mbconv, policy):
        for graph in (toy_msa, toy_mbconv):
            _, qmodel = quantized(graph, policy, samples=4)
            crosscheck(graph, qmodel, 10, seed=3)

    def test_tracks_float_reference(self, toy_mbconv, toy_mbconv_quant, rng):
        _, qmodel = toy_mbconv_quant
        model = lower(toy_mbconv, qmodel)
        x = rng.standard_normal((1,) + toy_mbconv.input_shape)
        result = forward_int(toy_mbconv, qmodel, model.quantize_input(x), model=model)
        approx = dequantize_output(model, result.logits).ravel()
        reference = forward_float(toy_mbconv, x)[0].data.ravel()
        assert np.corrcoef(approx, reference)[0, 1] > 0.95

    def test_msa_classifier_top1_agrees(self):
        graph = folded('toy-msa-cls')
        _, qmodel = quantized(graph, samples=32)
        model = lower(graph, qmodel)
        rng = np.random.default_rng(99)
        agree = 0
        for _ in range(200):
            x = rng.standard_normal((1,) + graph.input_shape)
            result = forward_int(graph, qmodel, model.quantize_input(x), model=model)
            logits = dequantize_output(model, result.logits).ravel()
            agree += int(np.argmax(logits) == np.argmax(forward_float(graph, x)[0].data.ravel()))
        assert agree >= 190

    def test_zero_input_propagates_bias(self):
        graph = folded('toy-pwconv')
        _, qmodel = quantized(graph, samples=4)
        model = lower(graph, qmodel)
        zeros = np.zeros((1,) + graph.input_shape, dtype=np.int64)
        logits = forward_int(graph, qmodel, zeros, model=model).logits.data.reshape(graph.output_shape)
        k = model.steps[0].consts
        expected = requantize_array(k['bias_q'], k['b'], k['c'])
        np.testing.assert_array_equal(logits, np.broadcast_to(expected[:, None, None], graph.output_shape))

    def test_rejects_wrong_shape(self, toy_mbconv, toy_mbconv_quant):
        with pytest.raises(ShapeError):
            forward_int(toy_mbconv, toy_mbconv_quant[1], np.zeros((1, 3, 8, 8), dtype=np.int64))

    def test_rejects_wide_input(self, toy_mbconv, toy_mbconv_quant):
        x = np.full((1,) + toy_mbconv.input_shape, 200)
        with pytest.raises(InvalidValueError):
            forward_int(toy_mbconv, toy_mbconv_quant[1], x)
