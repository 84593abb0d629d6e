import numpy as np
import pytest

from conftest import SHIPPED, config_path, shape_only, write_json
from errors import ConfigError, InvalidValueError, ShapeError
from model_graph import (Block, BlockKind, LayerKind, LayerParams, LayerSpec, ModelGraph, build_model, fold_bn,
                         forward_float, hswish, load_config, op_census, relu_linear_attention)
from tensor_core import conv2d_ref


def quadratic_attention(q, k, v):
    q, k = np.maximum(q, 0), np.maximum(k, 0)
    sim = q @ k.T
    return (sim @ v) / sim.sum(axis=1, keepdims=True)


def single_layer_config(**layer):
    return {
        'name': 'single',
        'input': {'resolution': 6, 'channels': 4},
        'stages': [{'blocks': [dict({'type': 'layer'}, **layer)]}],
    }


class TestLayerSpec:
    def test_pointwise_needs_kernel_one(self):
        with pytest.raises(ShapeError):
            LayerSpec('pw', LayerKind.PWCONV, 8, 8, (4, 4), kernel=3)

    def test_depthwise_needs_equal_channels(self):
        with pytest.raises(ShapeError):
            LayerSpec('dw', LayerKind.DWCONV, 8, 16, (4, 4), kernel=3)

    def test_stride_and_kernel_domains(self):
        with pytest.raises(ShapeError):
            LayerSpec('c', LayerKind.GENERIC_CONV, 3, 8, (8, 8), kernel=3, stride=3)
        with pytest.raises(ShapeError):
            LayerSpec('c', LayerKind.GENERIC_CONV, 3, 8, (8, 8), kernel=7)

    def test_depthwise_groups_follow_channels(self):
        spec = LayerSpec('dw', LayerKind.DWCONV, 12, 12, (8, 8), kernel=5, stride=2)
        assert spec.groups == 12
        assert spec.spatial_out == (4, 4)
        assert spec.macs == 12 * 16 * 25


class TestBuildModel:
    def test_single_mbconv_shapes(self, toy_mbconv):
        assert len(toy_mbconv.blocks) == 1
        block = toy_mbconv.blocks[0]
        assert block.kind is BlockKind.MBCONV and block.residual
        assert [layer.kind for layer in block.layers] == [LayerKind.PWCONV, LayerKind.DWCONV, LayerKind.PWCONV]
        assert block.layer('pw1').out_channels == 64
        assert block.out_shape == (16, 8, 8)

    def test_msa_layers(self, toy_msa):
        block = toy_msa.blocks[0]
        attn = block.layer('attn')
        assert attn.is_attention
        # qkv branch plus aggregated branch, two heads of width 8 each
        assert attn.heads == 4 and attn.head_dim == 8
        assert block.layer('agg_pw').groups == 6
        assert block.out_shape == (16, 8, 8)

    def test_head_pools_to_classifier(self, toy_effvit):
        head = toy_effvit.blocks[-1]
        assert head.kind is BlockKind.HEAD
        assert head.layer('classifier').spatial_in == (1, 1)
        assert toy_effvit.output_shape == (10, 1, 1)

    def test_unknown_block_type(self):
        config = {'input': {'resolution': 8}, 'stages': [{'blocks': [{'type': 'transformer'}]}]}
        with pytest.raises(ConfigError, match="unknown block type"):
            build_model(config)

    def test_inconsistent_shapes(self):
        with pytest.raises(ConfigError, match="inconsistent shapes"):
            build_model(single_layer_config(kind='conv', channels=8, kernel=3, stride=3))

    def test_msa_channel_mismatch(self):
        config = {'input': {'resolution': 8, 'channels': 16},
                  'stages': [{'blocks': [{'type': 'msa', 'channels': 32, 'dim': 8}]}]}
        with pytest.raises(ConfigError):
            build_model(config)

    def test_malformed_json_reports_position(self, tmp_path):
        path = write_json(tmp_path / "bad.json", '{\n  "input": {"resolution": 8,}\n}')
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert err.value.line == 2

    def test_weights_are_seeded(self):
        a = build_model(load_config(config_path('toy-mbconv')), seed=5)
        b = build_model(load_config(config_path('toy-mbconv')), seed=5)
        for name, params in a.params.items():
            np.testing.assert_array_equal(params.weight, b.params[name].weight)


class TestFoldBn:
    def _graph(self, **bn):
        graph = build_model(single_layer_config(kind='conv', channels=3, kernel=3, bn=True), seed=2)
        spec = next(graph.layers())
        params = graph.params[spec.name]
        c = spec.out_channels
        params.bn = {k: np.full(c, v, dtype=np.float32) for k, v in bn.items() if k != 'eps'}
        params.bn['eps'] = bn.get('eps', 0.0)
        return graph, spec, params

    def test_identity_bn_keeps_weights(self):
        graph, spec, params = self._graph(gamma=1.0, beta=0.0, mean=0.0, var=1.0)
        out = fold_bn(graph).params[spec.name]
        np.testing.assert_allclose(out.weight, params.weight, rtol=1e-6)
        np.testing.assert_allclose(out.bias, params.bias, rtol=1e-6)

    def test_scalar_algebra(self):
        graph, spec, params = self._graph(gamma=2.0, beta=1.0, mean=0.0, var=1.0)
        out = fold_bn(graph).params[spec.name]
        np.testing.assert_allclose(out.weight, 2 * params.weight, rtol=1e-6)
        np.testing.assert_allclose(out.bias, 2 * params.bias + 1, rtol=1e-6)

    def test_folded_forward_equals_unfolded(self, rng):
        graph = build_model(single_layer_config(kind='conv', channels=5, kernel=3, bn=True), seed=7)
        spec = next(graph.layers())
        p = graph.params[spec.name]
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        y = conv2d_ref(x, p.weight, p.bias, padding=1).data.astype(np.float64)
        bn = p.bn
        expected = (bn['gamma'][None, :, None, None] * (y - bn['mean'][None, :, None, None])
                    / np.sqrt(bn['var'][None, :, None, None] + bn['eps']) + bn['beta'][None, :, None, None])
        out, _ = forward_float(fold_bn(graph), x)
        assert np.max(np.abs(out.data - expected)) < 1e-4

    def test_clears_has_bn(self, toy_mbconv):
        assert not any(layer.has_bn for layer in toy_mbconv.layers())

    def test_rejects_non_positive_variance(self):
        graph, _, _ = self._graph(gamma=1.0, beta=0.0, mean=0.0, var=0.0)
        with pytest.raises(InvalidValueError):
            fold_bn(graph)

    def test_unfolded_graph_refuses_to_run(self):
        graph = build_model(single_layer_config(kind='conv', channels=3, kernel=3, bn=True))
        with pytest.raises(ShapeError, match="fold BatchNorm"):
            forward_float(graph, np.zeros((1, 4, 6, 6)))


class TestReluLinearAttention:
    def test_single_token_returns_v(self):
        q = np.array([[0.5, 1.0, 2.0]])
        k = np.array([[1.0, 0.2, 0.3]])
        v = np.array([[3.0, -1.0, 0.25]])
        np.testing.assert_allclose(relu_linear_attention(q, k, v).data, v, rtol=1e-6)

    def test_small_example_matches_quadratic_form(self, rng):
        q, k, v = (rng.uniform(0, 1, (4, 3)) for _ in range(3))
        out = relu_linear_attention(q, k, v).data
        np.testing.assert_allclose(out, quadratic_attention(q, k, v), atol=1e-5)

    def test_equivalence_over_random_instances(self, rng):
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 65))
            d = int(rng.integers(1, 33))
            q, k = rng.uniform(0, 1, (n, d)), rng.uniform(0, 1, (n, d))
            v = rng.standard_normal((n, d))
            expected = quadratic_attention(q, k, v)
            out = relu_linear_attention(q, k, v).data
            worst = max(worst, np.max(np.abs(out - expected)) / np.max(np.abs(expected)))
        assert worst < 1e-4

    def test_zero_query_row_uses_guard(self, rng):
        q = rng.uniform(0.1, 1, (4, 3))
        q[2] = -1.0
        k, v = rng.uniform(0.1, 1, (4, 3)), rng.standard_normal((4, 3))
        diagnostics = {}
        out = relu_linear_attention(q, k, v, diagnostics=diagnostics).data
        assert diagnostics['zero_denominator_rows'] == 1
        np.testing.assert_array_equal(out[2], 0.0)
        assert np.all(np.isfinite(out))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            relu_linear_attention(np.ones((4, 3)), np.ones((4, 3)), np.ones((5, 3)))


class TestForwardFloat:
    def test_zero_model_gives_zero_logits(self, toy_effvit):
        zeros = {name: LayerParams(np.zeros_like(p.weight), np.zeros_like(p.bias) if p.bias is not None else None)
                 for name, p in toy_effvit.params.items()}
        out, _ = forward_float(toy_effvit.with_params(zeros), np.zeros((1,) + toy_effvit.input_shape))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_mbconv_matches_manual_composition(self, toy_mbconv, rng):
        x = rng.standard_normal((1,) + toy_mbconv.input_shape).astype(np.float32)
        block = toy_mbconv.blocks[0]
        p = {s.name: toy_mbconv.params[s.name] for s in block.layers}
        pw1, dw, pw2 = block.layers
        y = hswish(conv2d_ref(x, p[pw1.name].weight, p[pw1.name].bias).data)
        y = hswish(conv2d_ref(y, p[dw.name].weight, p[dw.name].bias, padding=dw.padding, groups=dw.groups).data)
        y = conv2d_ref(y, p[pw2.name].weight, p[pw2.name].bias).data + x
        out, _ = forward_float(toy_mbconv, x)
        np.testing.assert_allclose(out.data, y, rtol=1e-5, atol=1e-5)

    def test_captures_every_quantizable_layer(self, toy_effvit, rng):
        x = rng.standard_normal((1,) + toy_effvit.input_shape)
        _, captured = forward_float(toy_effvit, x, capture=True)
        assert set(captured) == {s.name for s in toy_effvit.quantizable_layers()}

    def test_wrong_input_shape(self, toy_mbconv):
        with pytest.raises(ShapeError):
            forward_float(toy_mbconv, np.zeros((1, 3, 8, 8)))


class TestOpCensus:
    def test_single_pointwise_layer(self):
        census = op_census(shape_only('toy-pwconv'))
        assert census.counts['pwconv'] == 16 * 32 * 64 == 32768
        assert census.shares()['pwconv'] == 100.0

    def test_b1_r224_mix(self):
        census = op_census(shape_only('effvit-b1-r224'))
        assert census.gmacs == pytest.approx(0.52, rel=0.05)
        shares = census.shares()
        for kind, expected in (('generic_conv', 1.1), ('pwconv', 91.9), ('dwconv', 5.4), ('matmul', 1.6)):
            assert abs(shares[kind] - expected) <= 1.0, kind

    def test_b2_r224_total(self):
        assert op_census(shape_only('effvit-b2-r224')).gmacs == pytest.approx(1.6, rel=0.05)

    def test_flops_count_multiply_and_add(self):
        census = op_census(shape_only('toy-pwconv'))
        assert census.gflops == 2 * census.gmacs == 2 * 32768 / 1e9
        assert census.to_dict()['gflops'] == census.gflops

    @pytest.mark.parametrize("name", SHIPPED)
    def test_conservation(self, name):
        graph = shape_only(name)
        census = op_census(graph)
        assert sum(census.counts.values()) == census.total_macs == sum(s.macs for s in graph.layers())
        assert sum(census.shares().values()) == pytest.approx(100.0, abs=1e-9)
        assert sum(census.per_stage.values()) == census.total_macs

    def test_regrouping_keeps_totals(self):
        graph = shape_only('toy-effvit')
        flat = ModelGraph(graph.name, graph.input_shape,
                          [Block('all', BlockKind.LAYER, list(graph.layers()))])
        assert op_census(flat).counts == op_census(graph).counts
