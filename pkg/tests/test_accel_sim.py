import numpy as np
import pytest

from conftest import SHIPPED, shape_only
from accel_sim import (AttentionCosts, Engine, EngineConfig, MatEngine, RMacEngine, Timeline, cycles_mat,
                       cycles_rmac_dense, cycles_rmac_dw, dense_core_cycles, schedule_inter_layer,
                       schedule_intra_layer, serial_block_cycles, simulate)
from errors import ConfigError, SimulationError
from model_graph import BlockKind, LayerKind, LayerSpec, build_model
from tensor_core import correlate

SKEWED = EngineConfig(N=4, M=3, T=8, S=2, L=2)


def random_layer(rng, i):
    h = int(rng.integers(3, 8))
    stride = int(rng.integers(1, 3))
    kind = i % 4
    if kind == 0:
        return LayerSpec(f"l{i}.pw", LayerKind.PWCONV, int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                         (h, h), stride=stride)
    if kind == 1:
        return LayerSpec(f"l{i}.conv", LayerKind.GENERIC_CONV, int(rng.integers(1, 5)), int(rng.integers(1, 9)),
                         (h, h), kernel=int(rng.choice([3, 5])), stride=stride)
    if kind == 2:
        c = int(rng.integers(1, 13))
        return LayerSpec(f"l{i}.dw", LayerKind.DWCONV, c, c, (h, h), kernel=int(rng.choice([3, 5])), stride=stride)
    g = int(rng.integers(2, 5))
    return LayerSpec(f"l{i}.gpw", LayerKind.PWCONV, g * int(rng.integers(1, 5)), g * int(rng.integers(1, 5)),
                     (h, h), groups=g)


def msa_block(resolution, channels, dim):
    config = {'input': {'resolution': resolution, 'channels': channels},
              'stages': [{'blocks': [{'type': 'msa', 'dim': dim, 'kernel': 5}]}]}
    return build_model(config, with_weights=False).blocks[0]


def blocks_of(kinds):
    for name in SHIPPED:
        for block in shape_only(name).blocks:
            if block.kind in kinds:
                yield name, block


class TestEngineConfig:
    def test_default_resources(self):
        cfg = EngineConfig()
        assert cfg.total_multipliers == 2048
        assert cfg.peak_gops == pytest.approx(819.2)
        assert cfg.dsp_count == 1024

    def test_rejects_non_positive_geometry(self):
        with pytest.raises(ConfigError):
            EngineConfig(N=0)
        with pytest.raises(ConfigError):
            EngineConfig(clock_mhz=0)

    def test_replace_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown"):
            EngineConfig().replace(lanes=4)

    def test_dict_round_trip(self):
        cfg = EngineConfig().replace(L=8, clock_mhz=100)
        assert EngineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
        assert cfg.peak_gops == pytest.approx(819.2 / 4)


class TestCycleFormulas:
    def test_pointwise_single_pixel(self):
        layer = LayerSpec('pw', LayerKind.PWCONV, 8, 8, (1, 1))
        assert cycles_mat(layer, EngineConfig()) == 4

    def test_pointwise_feature_map(self):
        layer = LayerSpec('pw', LayerKind.PWCONV, 64, 64, (14, 14))
        assert cycles_mat(layer, EngineConfig()) == 12547

    @pytest.mark.parametrize("kernel,stride,size,expected", [(3, 1, 8, 72), (5, 1, 8, 200), (3, 2, 16, 88)])
    def test_depthwise(self, kernel, stride, size, expected):
        layer = LayerSpec('dw', LayerKind.DWCONV, 8, 8, (size, size), kernel=kernel, stride=stride)
        assert cycles_rmac_dw(layer, EngineConfig()) == expected

    def test_depthwise_needs_self_accumulation(self):
        layer = LayerSpec('dw', LayerKind.DWCONV, 8, 8, (8, 8), kernel=3)
        with pytest.raises(SimulationError):
            cycles_rmac_dense(layer, EngineConfig())
        with pytest.raises(SimulationError):
            cycles_mat(layer, EngineConfig())

    def test_self_accumulation_runs_depthwise_only(self):
        with pytest.raises(SimulationError):
            cycles_rmac_dw(LayerSpec('pw', LayerKind.PWCONV, 8, 8, (4, 4)), EngineConfig())

    def test_pixel_share(self):
        layer = LayerSpec('pw', LayerKind.PWCONV, 16, 16, (4, 4))
        cfg = EngineConfig()
        assert cycles_mat(layer, cfg, pixels=4) == 2 * 2 * 4 + cfg.fill_mat


class TestEngineModels:
    @pytest.mark.parametrize("cfg", [EngineConfig(), SKEWED])
    def test_register_models_match_formulas(self, cfg, rng):
        for i in range(100):
            layer = random_layer(rng, i)
            x = rng.integers(-128, 128, size=(1, layer.in_channels) + layer.spatial_in)
            w = rng.integers(-128, 128, size=layer.weight_shape())
            ref = correlate(x, w, layer.stride, layer.padding, layer.groups)
            if layer.kind is LayerKind.DWCONV:
                out, cycles = RMacEngine(cfg.N, cfg.M, cfg.phase_switch_overhead).run_dw(x, w, layer.stride)
                assert cycles == cycles_rmac_dw(layer, cfg), layer.name
                np.testing.assert_array_equal(out, ref)
                continue
            out, cycles = MatEngine(cfg.T, cfg.S).run(x, w, layer.stride, layer.padding, layer.groups)
            assert cycles == cycles_mat(layer, cfg), layer.name
            np.testing.assert_array_equal(out, ref)
            out, cycles = RMacEngine(cfg.N, cfg.M).run_dense(x, w, layer.stride, layer.padding, layer.groups)
            assert cycles == cycles_rmac_dense(layer, cfg), layer.name
            np.testing.assert_array_equal(out, ref)

    def test_matmul_stream(self, rng):
        a = rng.integers(-128, 128, size=(5, 12))
        b = rng.integers(-128, 128, size=(12, 7))
        out, cycles = MatEngine(8, 8).run_matmul(a, b)
        np.testing.assert_array_equal(out, a @ b)
        assert cycles == 5 * 2 * 1 + 3

    def test_one_image_at_a_time(self):
        with pytest.raises(SimulationError):
            MatEngine(8, 8).run(np.zeros((2, 1, 3, 3)), np.zeros((1, 1, 1, 1)))


class TestTimeline:
    def test_dependency_violation_detected(self):
        tl = Timeline('t')
        first = tl.add(Engine.RMAC, 'a', (0,), 10, 0)
        tl.add(Engine.MAT, 'b', (0,), 5, 4, [first])
        assert len(tl.violations()) == 1

    def test_exclusive_engine_overlap_detected(self):
        tl = Timeline('t')
        tl.add(Engine.MAT, 'a', (0,), 10, 0)
        tl.add(Engine.MAT, 'b', (0,), 10, 5)
        assert tl.violations()

    def test_busy_merges_overlaps(self):
        tl = Timeline('t', drain=4)
        tl.add(Engine.SHIFTER, 'a', (0,), 10, 0)
        tl.add(Engine.SHIFTER, 'a', (1,), 10, 5)
        tl.add(Engine.SHIFTER, 'a', (2,), 2, 20)
        assert tl.busy(Engine.SHIFTER) == 17
        assert tl.cycles == 26


class TestInterLayerPipeline:
    def test_toy_block_beats_serial(self):
        block = shape_only('toy-mbconv').blocks[0]
        cfg = EngineConfig()
        tl = schedule_inter_layer(block, cfg)
        assert tl.violations() == []
        assert tl.cycles < serial_block_cycles(block, cfg)

    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_blocks_beat_serial(self, name):
        cfg = EngineConfig()
        for block in shape_only(name).blocks:
            if block.kind in (BlockKind.MBCONV, BlockKind.DSCONV):
                tl = schedule_inter_layer(block, cfg)
                assert tl.violations() == []
                assert tl.cycles < serial_block_cycles(block, cfg), block.name

    def test_free_depthwise_leaves_pointwise_only(self):
        block = shape_only('toy-mbconv').blocks[0]
        cfg = EngineConfig()
        pw1, _, pw2 = block.layers
        expected = dense_core_cycles(pw1, cfg).cycles + dense_core_cycles(pw2, cfg).cycles + 2 * cfg.requant_depth
        assert schedule_inter_layer(block, cfg, dw_cost=0).cycles == expected

    def test_pointwise_tiles_wait_for_their_segment(self):
        tl = schedule_inter_layer(shape_only('toy-mbconv').blocks[0], SKEWED)
        pw_tiles = [op for op in tl.ops if op.layer.endswith('.pw2')]
        assert pw_tiles and all(op.deps and op.start >= op.deps[0].end for op in pw_tiles)

    def test_rejects_other_blocks(self):
        with pytest.raises(SimulationError):
            schedule_inter_layer(shape_only('toy-msa').blocks[0], EngineConfig())


class TestIntraLayerPipeline:
    def test_single_head_example(self):
        block = msa_block(7, 16, 16)
        cfg = EngineConfig()
        tl = schedule_intra_layer(block, cfg)
        steps = {op.tile[1]: op for op in tl.ops}
        assert (steps['kv'].start, steps['kv'].end) == (0, 227)
        assert (steps['den'].engine, steps['den'].end) == (Engine.RMAC, 325)
        assert (steps['num'].engine, steps['num'].end) == (Engine.MAT, 426)
        assert (steps['shift'].start, steps['shift'].end) == (325, 428)
        assert tl.makespan == 428 and tl.cycles == 432
        assert AttentionCosts(block.layer('attn'), cfg).serial(cfg) == 738

    def test_key_sum_finishes_with_step_one(self):
        tl = schedule_intra_layer(msa_block(7, 16, 16), EngineConfig())
        kv = [op for op in tl.ops if op.tile[1] == 'kv']
        ksum = [op for op in tl.ops if op.tile[1] == 'ksum']
        assert [op.engine for op in ksum] == [Engine.ADDER_TREE] * len(kv)
        assert [op.end for op in ksum] == [op.end for op in kv]

    def test_shipped_attention_beats_serial(self):
        cfg = EngineConfig()
        for name, block in blocks_of((BlockKind.MSA,)):
            tl = schedule_intra_layer(block, cfg)
            assert tl.violations() == []
            assert tl.cycles < AttentionCosts(block.layer('attn'), cfg).serial(cfg), f"{name} {block.name}"

    def test_rejects_other_blocks(self):
        with pytest.raises(SimulationError):
            schedule_intra_layer(shape_only('toy-mbconv').blocks[0], EngineConfig())


class TestSimulate:
    def test_b1_r288_latency_and_throughput(self):
        report = simulate(shape_only('effvit-b1-r288'))
        assert report.latency_ms == pytest.approx(2.24, rel=0.2)
        assert report.fps == pytest.approx(447, rel=0.2)
        assert 650 <= report.gops <= 819.2

    def test_b2_r224_latency(self):
        report = simulate(shape_only('effvit-b2-r224'))
        assert report.latency_ms == pytest.approx(4.05, rel=0.2)
        assert 650 <= report.gops <= 819.2

    @pytest.mark.parametrize("name", SHIPPED)
    def test_report_invariants(self, name):
        report = simulate(shape_only(name))
        assert report.gops <= report.cfg.peak_gops
        assert all(0.0 <= u <= 1.0 for u in report.utilization().values())
        assert report.overlap_saved > 0
        assert report.padding_waste >= 0
        totals = report.to_dict()['totals']
        assert totals['dsp'] == 1024
        assert totals['gops_per_dsp'] == pytest.approx(report.gops / 1024)

    def test_more_cores_never_slower(self):
        graph = shape_only('effvit-b1-r288')
        latencies = [simulate(graph, EngineConfig(L=cores)).latency_ms for cores in (8, 16, 32)]
        assert latencies == sorted(latencies, reverse=True)

    def test_halving_clock_doubles_latency(self):
        graph = shape_only('toy-effvit')
        fast = simulate(graph, EngineConfig())
        slow = simulate(graph, EngineConfig(clock_mhz=100))
        assert slow.total_cycles == fast.total_cycles
        assert slow.latency_ms == pytest.approx(2 * fast.latency_ms)

    def test_finite_bandwidth(self):
        graph = shape_only('toy-effvit')
        starved = simulate(graph, EngineConfig(dram_bytes_per_cycle=0.5))
        assert starved.total_cycles > simulate(graph).total_cycles
        assert any(s['bandwidth_bound'] for s in starved.to_dict()['segments'])

    def test_layer_table(self):
        table = simulate(shape_only('toy-effvit')).layer_table()
        assert {'name', 'kind', 'engines', 'cycles', 'macs', 'utilization'} <= set(table.columns)
        assert table['utilization'].between(0, 1).all()

    def test_standalone_activation_has_no_mapping(self):
        with pytest.raises(SimulationError):
            simulate(shape_only('toy-relu'))
