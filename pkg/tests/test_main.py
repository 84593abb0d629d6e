import json
import os

import numpy as np
import pytest

from conftest import config_path, folded, write_json
from errors import ConfigError
from main import BANNER, main, parse_sweep
from model_graph import forward_float
from quant_engine import synthetic_calibration
from tensor_core import DType, Tensor, load_tensor, save_tensor


def run(command, model, out, *extra):
    return main([command, config_path(model), '--out', str(out), '--quiet', '--seed', '0', *extra])


def read(out, name):
    with open(os.path.join(str(out), name), encoding='utf-8') as f:
        return json.load(f)


class TestBanner:
    def test_plain_english(self):
        text = BANNER.strip('\n').splitlines()
        assert 'accelerator co-simulation' in BANNER
        assert not any('\u4e00' <= ch <= '\u9fff' for ch in BANNER)
        assert len({len(line) for line in text}) == 1


class TestParseSweep:
    def test_values(self):
        assert parse_sweep('L=8,16,32') == [{'L': '8'}, {'L': '16'}, {'L': '32'}]

    def test_no_sweep(self):
        assert parse_sweep(None) == [{}]

    @pytest.mark.parametrize("text", ['L', '=8,16', 'lanes=1,2'])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_sweep(text)


class TestCensusCommand:
    def test_writes_census(self, tmp_path):
        assert run('census', 'toy-effvit', tmp_path) == 0
        census = read(tmp_path, 'census.json')
        assert set(census['macs']) >= {'pwconv', 'dwconv', 'matmul'}
        assert read(tmp_path, 'manifest.json')['command'] == 'census'

    def test_malformed_config_exits_2(self, tmp_path):
        path = write_json(tmp_path / "bad.json", '{"input": ')
        assert main(['census', path, '--out', str(tmp_path / "run"), '--quiet']) == 2


class TestQuantizeAndInfer:
    def test_crosscheck_is_bit_exact(self, tmp_path):
        assert run('quantize', 'toy-mbconv', tmp_path / "q", '--samples', '4') == 0
        quant = read(tmp_path / "q", 'quant.json')
        assert quant['coverage']['migration'] == 1
        assert read(tmp_path / "q", 'variation.json')
        code = run('infer', 'toy-mbconv', tmp_path / "i", '--quant', str(tmp_path / "q" / "quant.json"),
                   '--mode', 'crosscheck', '--count', '3')
        assert code == 0
        diagnostics = read(tmp_path / "i", 'diagnostics.json')
        assert diagnostics['bit_exact'] is True
        assert len(diagnostics['samples']) == 3
        logits = load_tensor(str(tmp_path / "i" / "outputs" / "output_0002.tqt"))
        assert logits.dtype is DType.I32

    def test_float_outputs_match_reference(self, tmp_path):
        assert run('infer', 'toy-msa', tmp_path, '--mode', 'float', '--count', '1') == 0
        graph = folded('toy-msa')
        expected, _ = forward_float(graph, synthetic_calibration(graph, 1, 0)[0])
        out = load_tensor(str(tmp_path / "outputs" / "output_0000.tqt"))
        np.testing.assert_array_equal(out.data, expected.data)

    def test_calibrates_from_tensor_directory(self, tmp_path, rng):
        inputs = tmp_path / "inputs"
        inputs.mkdir()
        for i in range(3):
            x = rng.standard_normal((1, 16, 8, 8)).astype(np.float32)
            save_tensor(str(inputs / f"x{i}.tqt"), Tensor(x, DType.F32))
        assert run('quantize', 'toy-msa', tmp_path / "q", '--calib', str(inputs)) == 0
        assert read(tmp_path / "q", 'manifest.json')['inputs'] == str(inputs)

    def test_migration_off_reports_ablation(self, tmp_path):
        assert run('quantize', 'toy-mbconv', tmp_path, '--samples', '4', '--no-migration') == 0
        assert read(tmp_path, 'quant.json')['coverage']['migration'] == 0
        assert set(read(tmp_path, 'ablation.json')['migration']) == {'with', 'without'}

    def test_uniform_divisor_reports_zero_mapping(self, tmp_path):
        assert run('quantize', 'toy-msa', tmp_path, '--samples', '4', '--divisor', 'uniform8') == 0
        divisor = read(tmp_path, 'ablation.json')['divisor']
        assert divisor['uniform8']['zero_mapped'] > 0
        assert divisor['log2-4']['zero_mapped'] == 0

    def test_missing_calibration_source_exits_3(self, tmp_path):
        assert run('quantize', 'toy-mbconv', tmp_path, '--calib', str(tmp_path / "nowhere")) == 3

    def test_integer_inference_without_dump_exits_4(self, tmp_path):
        assert run('infer', 'toy-mbconv', tmp_path, '--mode', 'int') == 4
        assert run('infer', 'toy-mbconv', tmp_path, '--quant', str(tmp_path / "absent.json")) == 4


class TestSimulateCommand:
    def test_sweep_lanes(self, tmp_path):
        assert run('simulate', 'effvit-b1-r288', tmp_path, '--sweep', 'L=8,16,32') == 0
        fps = [read(tmp_path, f"sim_L{n}.json")['totals']['fps'] for n in (8, 16, 32)]
        assert fps == sorted(fps)

    def test_default_report(self, tmp_path):
        assert run('simulate', 'toy-effvit', tmp_path, '--table') == 0
        totals = read(tmp_path, 'sim.json')['totals']
        assert totals['peak_gops'] == pytest.approx(819.2)
        assert 0 < totals['gops'] <= totals['peak_gops']

    def test_engine_file(self, tmp_path):
        engine = write_json(tmp_path / "engine.json", '{"L": 8}')
        assert run('simulate', 'toy-effvit', tmp_path / "run", '--engine', engine) == 0
        assert read(tmp_path / "run", 'sim.json')['config']['L'] == 8

    def test_unmappable_layer_exits_5(self, tmp_path):
        assert run('simulate', 'toy-relu', tmp_path) == 5

    def test_bad_sweep_exits_2(self, tmp_path):
        assert run('simulate', 'toy-effvit', tmp_path, '--sweep', 'lanes=1,2') == 2
