"""
evq command-line entry point
Census, quantization, integer inference and accelerator simulation of EfficientViT models
"""

import argparse
import os
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from accel_sim import EngineConfig, simulate
from config import CALIB_SAMPLES, OUTPUT_DIR, SEED
from errors import ConfigError, EvqError, QuantArtifactError
from int_runtime import dequantize_output, forward_int, lower
from logger import bind_logger
from model_graph import LayerKind, build_model, fold_bn, forward_float, load_config, op_census
from persistence import ArtifactStore, RunManifest, load_engine_config, load_inputs, load_quant
from quant_engine import (QuantPolicy, calibrate, divisor_error, divisor_stress, migration_mse, quantize_model,
                          shifting_mse, synthetic_calibration)
from tensor_core import DType, Tensor, synth_asymmetry, synth_variation, variation_report

BANNER = """
╔════════════════════════════════════════════════════════════╗
║    evq: EfficientViT PTQ and accelerator co-simulation     ║
║                                                            ║
║  census     operation mix and GMACs                        ║
║  quantize   calibrate and write quant parameters           ║
║  infer      float / integer / crosscheck inference         ║
║  simulate   cycle-level accelerator report                 ║
╚════════════════════════════════════════════════════════════╝
"""


def _graph(path: str, seed: int, with_weights: bool = True):
    config = load_config(path)
    graph = build_model(config, seed=seed, with_weights=with_weights)
    return fold_bn(graph) if with_weights else graph


def _samples(source: str, graph, count: int, seed: int) -> List[np.ndarray]:
    if source == 'synthetic':
        return synthetic_calibration(graph, count, seed)
    return [t.data.astype(np.float32) for t in load_inputs(source)]


def cmd_census(args, store: ArtifactStore, logger) -> int:
    graph = _graph(args.model, args.seed, with_weights=False)
    census = op_census(graph)
    shares = census.shares()
    table = pd.DataFrame({
        'kind': list(census.counts),
        'macs': list(census.counts.values()),
        'share_%': [round(shares[k], 2) for k in census.counts],
    })
    logger.log(table.to_string(index=False))
    store.save_json('census.json', census.to_dict())
    logger.print_summary(f"📊 Census: {graph.name}", {
        'Total MACs': f"{census.total_macs:,}",
        'GMACs': census.gmacs,
        'GFLOPs': census.gflops,
    })
    return 0


def _ablation_warnings(policy: QuantPolicy, seed: int, logger) -> Dict:
    """Desk-scale evidence for switched-off techniques"""
    report = {}
    if not policy.migration:
        errors = migration_mse(synth_variation(32, 8, 100.0, seed))
        report['migration'] = errors
        if errors['without'] > errors['with']:
            logger.warn(f"migration off: synthetic variation MSE {errors['without']:.3e} vs {errors['with']:.3e} with migration")
    if not policy.shifting:
        errors = shifting_mse(synth_asymmetry(32, 8, 10.0, seed))
        report['shifting'] = errors
        if errors['without'] > errors['with']:
            logger.warn(f"shifting off: synthetic asymmetry MSE {errors['without']:.3e} vs {errors['with']:.3e} with shifting")
    if policy.divisor == 'uniform8':
        stress = divisor_stress(4096, seed)
        uniform = divisor_error(stress, 'uniform8')
        log2 = divisor_error(stress, 'log2-4', policy.log2_clip)
        report['divisor'] = {'uniform8': uniform, 'log2-4': log2}
        if uniform['mean_rel_error'] > log2['mean_rel_error']:
            logger.warn(f"uniform8 divisors: mean relative error {uniform['mean_rel_error']:.3f} "
                        f"({uniform['zero_mapped']} mapped to zero) vs {log2['mean_rel_error']:.3f} for log2-4")
    return report


def cmd_quantize(args, store: ArtifactStore, logger) -> int:
    graph = _graph(args.model, args.seed)
    policy = QuantPolicy(migration=not args.no_migration, shifting=not args.no_shifting, divisor=args.divisor,
                         shift_formula=args.shift_formula, log2_rounding=args.log2_rounding,
                         use_scale_search=not args.no_scale_search)
    logger.log(f"Calibrating {graph.name} on {args.calib} ({args.samples} samples)...")
    calib = calibrate(graph, _samples(args.calib, graph, args.samples, args.seed))
    qmodel = quantize_model(graph, calib, policy, seed=args.seed)
    store.save_quant(qmodel)
    # variation / asymmetry of the tensors feeding DW and PW layers
    variation = {}
    for spec in graph.quantizable_layers():
        record = qmodel.layers.get(spec.name)
        if record is not None and record.input in calib.stats and spec.kind in (LayerKind.DWCONV, LayerKind.PWCONV):
            variation[spec.name] = variation_report(calib.stats_for(record.input))
    store.save_json('variation.json', variation)
    ablation = _ablation_warnings(policy, args.seed, logger)
    if ablation:
        store.save_json('ablation.json', ablation)
    coverage = qmodel.coverage()
    logger.print_summary(f"🧮 Quantized: {graph.name}", {
        'Layers': coverage['layers'],
        'CW migration': coverage['migration'],
        'FW shifting': coverage['shifting'],
        'Log2 divisors': coverage['log2'],
        'Uniform divisors': coverage['uniform_divisor'],
        'Policy': f"divisor={policy.divisor}, rounding={policy.log2_rounding}",
    })
    return 0


def cmd_infer(args, store: ArtifactStore, logger) -> int:
    graph = _graph(args.model, args.seed)
    inputs = _samples(args.inputs, graph, args.count, args.seed)
    results: Dict = {'mode': args.mode, 'samples': []}
    outputs: Dict[str, Tensor] = {}
    if args.mode == 'float':
        for i, x in enumerate(inputs):
            diagnostics: Dict[str, int] = {}
            out, _ = forward_float(graph, x, diagnostics=diagnostics)
            outputs[f"output_{i:04d}"] = out
            results['samples'].append({'index': i, 'argmax': int(np.argmax(out.data.reshape(-1))),
                                       'diagnostics': diagnostics})
    else:
        if not args.quant:
            raise QuantArtifactError("integer inference needs --quant")
        qmodel = load_quant(args.quant)
        model = lower(graph, qmodel)
        exact = True
        for i, x in enumerate(inputs):
            x_q = Tensor(model.quantize_input(x), DType.I8)
            result = forward_int(graph, qmodel, x_q, crosscheck=args.mode == 'crosscheck', model=model)
            outputs[f"output_{i:04d}"] = result.logits
            logits = dequantize_output(model, result.logits)
            entry = {'index': i, 'argmax': int(np.argmax(logits.reshape(-1))), 'diagnostics': result.diagnostics}
            if result.crosscheck is not None:
                entry['crosscheck'] = result.crosscheck
                exact = exact and result.crosscheck['bit_exact']
            results['samples'].append(entry)
        if args.mode == 'crosscheck':
            results['bit_exact'] = exact
            logger.log(f"{'✅' if exact else '❌'} bit-exact: {str(exact).lower()}")
    store.save_tensors('outputs', outputs)
    store.save_json('diagnostics.json', results)
    logger.print_summary(f"🔎 Inference: {graph.name}", {
        'Mode': args.mode,
        'Samples': len(inputs),
        'Bit-exact': results.get('bit_exact', 'n/a'),
    })
    return 0 if results.get('bit_exact', True) else 1


def parse_sweep(text: Optional[str]) -> List[Dict]:
    """'L=8,16,32' -> [{'L': 8}, {'L': 16}, {'L': 32}]"""
    if not text:
        return [{}]
    key, sep, values = text.partition('=')
    key = key.strip()
    if not sep or not key or not values:
        raise ConfigError(f"--sweep expects key=a,b,c, got '{text}'")
    if key not in EngineConfig.INT_FIELDS + EngineConfig.FLOAT_FIELDS:
        raise ConfigError(f"--sweep: unknown engine key '{key}'")
    return [{key: v.strip()} for v in values.split(',') if v.strip()]


def cmd_simulate(args, store: ArtifactStore, logger) -> int:
    graph = _graph(args.model, args.seed, with_weights=False)
    base = load_engine_config(args.engine)
    reports = []
    for overrides in parse_sweep(args.sweep):
        cfg = base.replace(**overrides)
        report = simulate(graph, cfg)
        suffix = '_'.join(f"{k}{v}" for k, v in overrides.items())
        store.save_json(f"sim_{suffix}.json" if suffix else 'sim.json', report.to_dict())
        if args.table:
            logger.log(report.layer_table().to_string(index=False))
        title = f"⚙️  Simulation: {graph.name}" + (f" ({suffix})" if suffix else "")
        logger.print_summary(title, report.summary_rows())
        reports.append((overrides, report))
    if len(reports) > 1:
        sweep = pd.DataFrame([{**o, 'cycles': r.total_cycles, 'latency_ms': round(r.latency_ms, 4),
                               'fps': round(r.fps, 1), 'gops': round(r.gops, 1)} for o, r in reports])
        logger.log(sweep.to_string(index=False))
    return 0


COMMANDS = {
    'census': cmd_census,
    'quantize': cmd_quantize,
    'infer': cmd_infer,
    'simulate': cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='EfficientViT PTQ engine and accelerator co-simulator')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('model', help='model config JSON')
        p.add_argument('--out', default=None, help=f'output directory (default {OUTPUT_DIR}/<command>)')
        p.add_argument('--seed', type=int, default=SEED, help='seed for weights and synthetic data')
        p.add_argument('--quiet', action='store_true', help='log to file only')

    common(sub.add_parser('census', help='operation census'))

    q = sub.add_parser('quantize', help='calibrate and quantize')
    common(q)
    q.add_argument('--calib', default='synthetic', help="'synthetic' or a directory of .tqt inputs")
    q.add_argument('--samples', type=int, default=CALIB_SAMPLES, help='synthetic calibration samples')
    q.add_argument('--no-migration', action='store_true', help='disable channel-wise migration')
    q.add_argument('--no-shifting', action='store_true', help='disable filter-wise shifting')
    q.add_argument('--divisor', choices=['log2-4', 'uniform8'], default='log2-4')
    q.add_argument('--shift-formula', choices=['midpoint', 'half-range'], default='midpoint')
    q.add_argument('--log2-rounding', choices=['nearest', 'lod'], default='nearest')
    q.add_argument('--no-scale-search', action='store_true', help='plain absmax activation scales')

    i = sub.add_parser('infer', help='run inference')
    common(i)
    i.add_argument('--quant', default=None, help='quant dump from the quantize command')
    i.add_argument('--inputs', default='synthetic', help="'synthetic' or a directory of .tqt inputs")
    i.add_argument('--count', type=int, default=4, help='synthetic inputs')
    i.add_argument('--mode', choices=['float', 'int', 'crosscheck'], default='int')

    s = sub.add_parser('simulate', help='cycle-level accelerator simulation')
    common(s)
    s.add_argument('--engine', default=None, help='engine config JSON')
    s.add_argument('--sweep', default=None, help='sweep one engine key, e.g. L=8,16,32')
    s.add_argument('--table', action='store_true', help='print the per-layer cycle table')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = args.out or os.path.join(OUTPUT_DIR, args.command)
    logger = bind_logger(out, echo=not args.quiet)
    if not args.quiet:
        print(BANNER)
    store = ArtifactStore(out)
    overrides = {k: v for k, v in vars(args).items() if k not in ('command', 'model', 'out', 'seed', 'quiet')}
    manifest = RunManifest(args.command, args.model, out, args.seed,
                           inputs=getattr(args, 'inputs', None) or getattr(args, 'calib', None),
                           overrides=overrides, argv=argv)
    try:
        store.save_manifest(manifest)
        return COMMANDS[args.command](args, store, logger)
    except EvqError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
