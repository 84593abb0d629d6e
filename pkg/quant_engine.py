"""
Post-training quantization engine

Uniform quantization, channel-wise migration for DW inputs, filter-wise
shifting for PW2 inputs, log2 divisors for attention, dyadic rescale
derivation, calibration and per-model orchestration.
"""

import math
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import (CALIB_RESERVOIR, DIVIDEND_BITS, DYADIC_MAX_BITS, LOG2_CLIP_HI, LOG2_CLIP_LO,
                    LOG2_ROUNDING, PERCENTILE_GRID)
from errors import CalibrationError, ConfigError, InvalidValueError, QuantArtifactError, ShapeError
from logger import get_logger
from model_graph import ACT_KINDS, BlockKind, LayerKind, LayerSpec, ModelGraph, forward_float
from tensor_core import ChannelStats, DType, Tensor, as_array, channel_stats


class QuantScheme(Enum):
    UNIFORM = "uniform"
    LOG2 = "log2"


def int_range(bits: int, signed: bool) -> Tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def _storage_dtype(bits: int, signed: bool) -> DType:
    if bits <= 8:
        return DType.I8 if signed else DType.U8
    return DType.I32


def quantize_array(x: np.ndarray, scale, bits: int = 8, signed: bool = True) -> np.ndarray:
    """round-half-even(x / scale) clipped to the integer range, as int64"""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidValueError("cannot quantize non-finite values")
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise InvalidValueError("quantization scale must be positive and finite")
    lo, hi = int_range(bits, signed)
    return np.clip(np.rint(x / scale), lo, hi).astype(np.int64)


def quantize_uniform(x, scale, bits: int = 8, signed: bool = True) -> Tensor:
    """Uniform quantization with round-to-nearest-even.

    Args:
        x: float tensor
        scale: positive scale, scalar or broadcastable (per-channel on axis 1)
        bits: target width; 2..8 stored as i8/u8, wider as i32
        signed: symmetric signed range, otherwise [0, 2^bits - 1]
    """
    if not 2 <= bits <= 32:
        raise InvalidValueError(f"unsupported bit width {bits}")
    q = quantize_array(as_array(x), scale, bits, signed)
    return Tensor(q, _storage_dtype(bits, signed))


def dequantize(q, scale) -> np.ndarray:
    return as_array(q).astype(np.float64) * np.asarray(scale, dtype=np.float64)


def _channel_shape(values: np.ndarray, axis: int = 1) -> List[int]:
    """Shape that broadcasts a per-channel vector along `axis`"""
    shape = [1] * values.ndim
    shape[axis] = -1
    return shape


def _positive_scale(absmax, qmax: int):
    absmax = np.asarray(absmax, dtype=np.float64)
    return np.where(absmax > 0, absmax, 1.0) / qmax


def weight_scales(weight: np.ndarray, bits: int = 8) -> np.ndarray:
    """Filter-wise absmax scales (one per output channel)"""
    w = np.asarray(weight, dtype=np.float64)
    absmax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    return _positive_scale(absmax, int_range(bits, True)[1])


def quantize_weights(weight: np.ndarray, scales: np.ndarray, bits: int = 8) -> np.ndarray:
    return quantize_array(weight, np.asarray(scales)[:, None, None, None], bits, True)


# ---------------------------------------------------------------------------
# Channel-wise migration and filter-wise shifting
# ---------------------------------------------------------------------------

def compute_migration_factors(stats: ChannelStats) -> np.ndarray:
    """M_i = max(A_i) / mean_j max(A_j); channels with max <= 0 keep M_i = 1"""
    maxima = stats.per_channel_max
    if not np.all(np.isfinite(maxima)):
        raise InvalidValueError("migration needs finite channel maxima")
    if not np.any(maxima > 0):
        raise InvalidValueError("all channel maxima are non-positive; migration is meaningless")
    mean = float(maxima.mean())
    if mean <= 0:
        raise InvalidValueError("mean of channel maxima is non-positive")
    return np.where(maxima > 0, maxima / mean, 1.0)


def apply_channel_migration(dw_weights, act_scale: float, M: Sequence[float]) -> Tuple[Tensor, np.ndarray]:
    """Fold migration factors into DW filters and fuse them into the input scale.

    Returns:
        (weights scaled per channel by M_i, fused scales S_a * M_i)
    """
    w = as_array(dw_weights)
    m = np.asarray(M, dtype=np.float64)
    if m.shape != (w.shape[0],):
        raise ShapeError(f"{m.size} migration factors for {w.shape[0]} DW channels")
    if np.any(m <= 0):
        raise InvalidValueError("migration factors must be positive")
    scaled = w.astype(np.float64) * m.reshape(-1, *([1] * (w.ndim - 1)))
    return Tensor(scaled.astype(np.float32), DType.F32), act_scale * m


def compute_filter_shift(stats: ChannelStats, formula: str = "midpoint") -> np.ndarray:
    """Per-channel centering offsets c_i.

    `midpoint` gives (max + min) / 2 so each shifted channel is symmetric;
    `half-range` reproduces the literal (max - min) / 2 formula for comparison.
    """
    if formula == "midpoint":
        return (stats.per_channel_max + stats.per_channel_min) / 2.0
    if formula == "half-range":
        return (stats.per_channel_max - stats.per_channel_min) / 2.0
    raise ConfigError(f"unknown shift formula '{formula}'")


def update_bias_for_shift(pw2_weights, bias: Optional[Sequence[float]], c: Sequence[float]) -> np.ndarray:
    """b_hat_j = sum_i c_i * w_ji + b_j"""
    w = as_array(pw2_weights).astype(np.float64)
    if w.ndim == 4:
        if w.shape[2:] != (1, 1):
            raise ShapeError("filter shifting expects a 1x1 (PW) weight")
        w = w[:, :, 0, 0]
    c = np.asarray(c, dtype=np.float64)
    if w.shape[1] != c.size:
        raise ShapeError(f"{c.size} shift offsets for {w.shape[1]} PW input channels")
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias length {b.size} != PW output channels {w.shape[0]}")
    return w @ c + b


# ---------------------------------------------------------------------------
# Dyadic rescaling
# ---------------------------------------------------------------------------

def dyadic_approx(s: float, max_bits: int = DYADIC_MAX_BITS) -> Tuple[int, int]:
    """Largest c with b = round(s * 2^c) < 2^max_bits.

    c goes negative (left shift) only when s >= 2^(max_bits - 1).
    """
    if not math.isfinite(s) or s <= 0:
        raise InvalidValueError(f"dyadic scale must be positive and finite, got {s}")
    mantissa, exponent = math.frexp(s)  # s = mantissa * 2^exponent, mantissa in [0.5, 1)
    c = max_bits - exponent
    b = round(mantissa * (1 << max_bits))
    if b >= (1 << max_bits):
        c -= 1
        b = round(math.ldexp(s, c))
    return int(b), int(c)


def dyadic_value(pair: Tuple[int, int]) -> float:
    b, c = pair
    return math.ldexp(b, -c)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def _channel_view(array: np.ndarray) -> np.ndarray:
    """(C, elements) view with channel axis 1; 1-D arrays are one channel"""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim < 2:
        return a.reshape(1, -1)
    return np.moveaxis(a, 1, 0).reshape(a.shape[1], -1)


class CalibRecord:
    """Running per-channel extrema plus a bounded value sample per tensor point"""

    def __init__(self, reservoir: int = CALIB_RESERVOIR):
        self.reservoir = reservoir
        self.stats: Dict[str, ChannelStats] = {}
        self.samples: Dict[str, np.ndarray] = {}
        self.sample_count = 0

    def observe(self, point: str, array: np.ndarray):
        view = _channel_view(array)
        batch = ChannelStats(view.min(axis=1), view.max(axis=1))
        self.stats[point] = self.stats[point].merge(batch) if point in self.stats else batch
        if view.shape[1] > self.reservoir:
            idx = np.linspace(0, view.shape[1] - 1, self.reservoir).round().astype(np.int64)
            view = view[:, idx]
        kept = np.concatenate([self.samples[point], view], axis=1) if point in self.samples else view
        if kept.shape[1] > 2 * self.reservoir:
            kept = kept[:, ::2]
        self.samples[point] = kept

    def stats_for(self, point: str) -> ChannelStats:
        if point not in self.stats:
            raise CalibrationError(f"no calibration statistics for '{point}'")
        return self.stats[point]

    def channel_samples(self, point: str) -> np.ndarray:
        if point not in self.samples:
            raise CalibrationError(f"no calibration samples for '{point}'")
        return self.samples[point]

    def values(self, point: str) -> np.ndarray:
        return self.channel_samples(point).ravel()


def synthetic_calibration(graph: ModelGraph, count: int, seed: int) -> List[np.ndarray]:
    """Standard-normal images of the model's input shape"""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((1,) + graph.input_shape).astype(np.float32) for _ in range(count)]


def calibrate(graph: ModelGraph, samples: Iterable) -> CalibRecord:
    """Run the float model over calibration inputs and record every tensor point"""
    record = CalibRecord()
    diagnostics: Dict[str, int] = {}
    for sample in samples:
        forward_float(graph, sample, observer=record.observe, diagnostics=diagnostics)
        record.sample_count += 1
    if record.sample_count == 0:
        raise CalibrationError("calibration source produced no samples")
    if diagnostics.get('zero_denominator_rows'):
        get_logger().warn(f"{diagnostics['zero_denominator_rows']} attention rows had zero denominators during calibration")
    return record


def search_scale(values: np.ndarray, bits: int = 8, signed: bool = True,
                 grid: Sequence[float] = PERCENTILE_GRID) -> float:
    """Percentile candidate minimizing dequantization MSE; ties go to the larger scale"""
    v = np.asarray(values, dtype=np.float64).ravel()
    if not signed:
        v = np.maximum(v, 0.0)
    mags = np.abs(v)
    qmax = int_range(bits, signed)[1]
    if not len(grid):
        raise InvalidValueError("percentile grid is empty")
    if mags.size == 0 or mags.max() == 0:
        return 1.0 / qmax
    candidates = sorted({float(np.percentile(mags, p)) for p in grid}, reverse=True)
    best_scale, best_mse = None, None
    for clip in candidates:
        if clip <= 0:
            continue
        scale = clip / qmax
        mse = float(np.mean((dequantize(quantize_array(v, scale, bits, signed), scale) - v) ** 2))
        if best_mse is None or mse < best_mse:
            best_scale, best_mse = scale, mse
    return best_scale


def scale_search(layer: str, calib: CalibRecord, metric: str = "mse", bits: int = 8,
                 signed: bool = True) -> float:
    """Refined layer-wise activation scale for one tensor point"""
    if metric != "mse":
        raise ConfigError(f"unsupported scale-search metric '{metric}'")
    return search_scale(calib.values(layer), bits, signed)


# ---------------------------------------------------------------------------
# Quantization records
# ---------------------------------------------------------------------------

class QuantPolicy:
    """Switches for the ablation axes"""

    def __init__(self, migration: bool = True, shifting: bool = True, divisor: str = "log2-4",
                 shift_formula: str = "midpoint", log2_rounding: str = LOG2_ROUNDING,
                 use_scale_search: bool = True, bits: int = 8,
                 log2_clip: Tuple[int, int] = (LOG2_CLIP_LO, LOG2_CLIP_HI),
                 dividend_bits: int = DIVIDEND_BITS):
        if divisor not in ("log2-4", "uniform8"):
            raise ConfigError(f"unknown divisor scheme '{divisor}'")
        if log2_rounding not in ("nearest", "lod"):
            raise ConfigError(f"unknown log2 rounding '{log2_rounding}'")
        self.migration = migration
        self.shifting = shifting
        self.divisor = divisor
        self.shift_formula = shift_formula
        self.log2_rounding = log2_rounding
        self.use_scale_search = use_scale_search
        self.bits = bits
        self.log2_clip = tuple(log2_clip)
        self.dividend_bits = dividend_bits

    def to_dict(self) -> Dict:
        return {
            'migration': self.migration,
            'shifting': self.shifting,
            'divisor': self.divisor,
            'shift_formula': self.shift_formula,
            'log2_rounding': self.log2_rounding,
            'scale_search': self.use_scale_search,
            'bits': self.bits,
            'log2_clip': list(self.log2_clip),
            'dividend_bits': self.dividend_bits,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "QuantPolicy":
        return cls(d.get('migration', True), d.get('shifting', True), d.get('divisor', 'log2-4'),
                   d.get('shift_formula', 'midpoint'), d.get('log2_rounding', LOG2_ROUNDING),
                   d.get('scale_search', True), d.get('bits', 8),
                   tuple(d.get('log2_clip', (LOG2_CLIP_LO, LOG2_CLIP_HI))),
                   d.get('dividend_bits', DIVIDEND_BITS))


def _floats(values) -> Optional[List[float]]:
    return None if values is None else [float(v) for v in np.ravel(values)]


def _array(values) -> Optional[np.ndarray]:
    return None if values is None else np.asarray(values, dtype=np.float64)


class TensorQuant:
    """Quantization of one named tensor: real = scale_c * q + offset_c"""

    def __init__(self, name: str, scales, offsets=None, bits: int = 8, signed: bool = True):
        self.name = name
        self.scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.float64)
        self.bits = bits
        self.signed = signed
        if np.any(self.scales <= 0):
            raise QuantArtifactError(f"{name}: non-positive scale")

    @property
    def scalar(self) -> bool:
        return self.scales.size == 1

    def to_dict(self) -> Dict:
        return {'name': self.name, 'scales': _floats(self.scales), 'offsets': _floats(self.offsets),
                'bits': self.bits, 'signed': self.signed}

    @classmethod
    def from_dict(cls, d: Dict) -> "TensorQuant":
        return cls(d['name'], d['scales'], d.get('offsets'), d.get('bits', 8), d.get('signed', True))


class QuantParams:
    """Per-layer quantization record"""

    def __init__(self, name: str, scheme: QuantScheme = QuantScheme.UNIFORM, bits: int = 8,
                 weight_scales=None, act_scale: Optional[float] = None, fused_scales=None,
                 migration=None, shift_offsets=None, updated_bias=None,
                 dyadic: Optional[List[Tuple[int, int]]] = None, input: Optional[str] = None,
                 pre_scales=None, attention: Optional[Dict] = None):
        self.name = name
        self.scheme = scheme
        self.bits = bits
        self.weight_scales = _array(weight_scales)
        self.act_scale = None if act_scale is None else float(act_scale)
        self.fused_scales = _array(fused_scales)
        self.migration = _array(migration)
        self.shift_offsets = _array(shift_offsets)
        self.updated_bias = _array(updated_bias)
        self.dyadic = [tuple(p) for p in dyadic] if dyadic else []
        self.input = input
        self.pre_scales = _array(pre_scales)
        self.attention = attention
        self.validate()

    def validate(self):
        if (self.act_scale is None) == (self.fused_scales is None):
            raise QuantArtifactError(f"{self.name}: exactly one of act_scale / fused_scales must be set")
        for label, values in (('weight_scales', self.weight_scales), ('fused_scales', self.fused_scales),
                              ('migration', self.migration), ('pre_scales', self.pre_scales)):
            if values is not None and np.any(values <= 0):
                raise QuantArtifactError(f"{self.name}: {label} must be positive")
        if self.act_scale is not None and self.act_scale <= 0:
            raise QuantArtifactError(f"{self.name}: act_scale must be positive")
        for b, _ in self.dyadic:
            if not 0 < b < (1 << DYADIC_MAX_BITS):
                raise QuantArtifactError(f"{self.name}: dyadic numerator {b} out of range")

    @property
    def input_scale(self) -> float:
        """Scale of the input in the accumulator view (migration cancels into weights)"""
        if self.act_scale is not None:
            return self.act_scale
        return float(self.fused_scales[0] / self.migration[0])

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'scheme': self.scheme.value,
            'bits': self.bits,
            'input': self.input,
            'weight_scales': _floats(self.weight_scales),
            'act_scale': self.act_scale,
            'fused_scales': _floats(self.fused_scales),
            'migration': _floats(self.migration),
            'shift': _floats(self.shift_offsets),
            'updated_bias': _floats(self.updated_bias),
            'pre_scales': _floats(self.pre_scales),
            'dyadic': [{'b': b, 'c': c} for b, c in self.dyadic],
            'attention': self.attention,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "QuantParams":
        try:
            return cls(d['name'], QuantScheme(d.get('scheme', 'uniform')), d.get('bits', 8),
                       d.get('weight_scales'), d.get('act_scale'), d.get('fused_scales'),
                       d.get('migration'), d.get('shift'), d.get('updated_bias'),
                       [(p['b'], p['c']) for p in d.get('dyadic', [])], d.get('input'),
                       d.get('pre_scales'), d.get('attention'))
        except (KeyError, TypeError, ValueError) as e:
            raise QuantArtifactError(f"malformed quant record {d.get('name', '?')}: {e}")


class QuantModel:
    """All layer records and tensor quantizers of one quantized model"""

    def __init__(self, model: str, layers: Dict[str, QuantParams], tensors: Dict[str, TensorQuant],
                 policy: QuantPolicy, seed: int = 0):
        self.model = model
        self.layers = layers
        self.tensors = tensors
        self.policy = policy
        self.seed = seed

    def count(self, technique: str) -> int:
        if technique == 'migration':
            return sum(1 for p in self.layers.values() if p.migration is not None)
        if technique == 'shifting':
            return sum(1 for p in self.layers.values() if p.shift_offsets is not None)
        if technique == 'log2':
            return sum(1 for p in self.layers.values() if p.scheme is QuantScheme.LOG2)
        if technique == 'uniform_divisor':
            return sum(1 for p in self.layers.values() if p.attention and p.scheme is QuantScheme.UNIFORM)
        raise KeyError(technique)

    def coverage(self) -> Dict[str, int]:
        return {
            'layers': len(self.layers),
            'migration': self.count('migration'),
            'shifting': self.count('shifting'),
            'log2': self.count('log2'),
            'uniform_divisor': self.count('uniform_divisor'),
        }

    def tensor(self, name: str) -> TensorQuant:
        if name not in self.tensors:
            raise QuantArtifactError(f"no quantizer for tensor '{name}'")
        return self.tensors[name]

    def layer(self, name: str) -> QuantParams:
        if name not in self.layers:
            raise QuantArtifactError(f"no quantization record for layer '{name}'")
        return self.layers[name]

    def to_dict(self) -> Dict:
        return {
            'model': self.model,
            'seed': self.seed,
            'policy': self.policy.to_dict(),
            'coverage': self.coverage(),
            'layers': [p.to_dict() for p in self.layers.values()],
            'tensors': [t.to_dict() for t in self.tensors.values()],
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "QuantModel":
        try:
            layers = {r['name']: QuantParams.from_dict(r) for r in d['layers']}
            tensors = {r['name']: TensorQuant.from_dict(r) for r in d['tensors']}
            return cls(d['model'], layers, tensors, QuantPolicy.from_dict(d.get('policy', {})), d.get('seed', 0))
        except (KeyError, TypeError) as e:
            raise QuantArtifactError(f"malformed quant dump: missing {e}")


# ---------------------------------------------------------------------------
# Execution plan shared by the quantizer and the integer runtime
# ---------------------------------------------------------------------------

class PlanStep:
    """One executable step: conv | add | pool | attention"""

    def __init__(self, op: str, name: str, inputs: List[str], output: str,
                 layer: Optional[LayerSpec] = None, block=None):
        self.op = op
        self.name = name
        self.inputs = inputs
        self.output = output
        self.layer = layer
        self.block = block


def build_plan(graph: ModelGraph) -> List[PlanStep]:
    """Linearize the graph into named tensor-to-tensor steps"""
    steps: List[PlanStep] = []
    current = 'input'

    def conv(spec: LayerSpec, src: str, block) -> str:
        steps.append(PlanStep('conv', spec.name, [src], spec.name, spec, block))
        return spec.name

    for block in graph.blocks:
        identity = current
        if block.kind is BlockKind.MSA:
            qkv, agg_dw, agg_pw, _, attn, proj = block.layers
            q = conv(qkv, current, block)
            a = conv(agg_pw, conv(agg_dw, q, block), block)
            steps.append(PlanStep('attention', attn.name, [q, a], attn.name, attn, block))
            current = conv(proj, attn.name, block)
        elif block.kind is BlockKind.HEAD:
            for spec in block.layers:
                current = _head_step(steps, block, spec, current, graph)
        else:
            for spec in block.layers:
                if spec.kind in ACT_KINDS:
                    raise ConfigError(f"{spec.name}: standalone activation layers run in float mode only")
                current = conv(spec, current, block)
        if block.residual:
            steps.append(PlanStep('add', f"{block.name}.add", [identity, current], f"{block.name}.add", None, block))
            current = f"{block.name}.add"
    return steps


def _head_step(steps: List[PlanStep], block, spec: LayerSpec, current: str, graph: ModelGraph) -> str:
    pooled = f"{block.name}.pool"
    if spec.spatial_in == (1, 1) and current != pooled and not _is_pooled(steps, current, graph):
        steps.append(PlanStep('pool', pooled, [current], pooled, None, block))
        current = pooled
    steps.append(PlanStep('conv', spec.name, [current], spec.name, spec, block))
    return spec.name


def _is_pooled(steps: List[PlanStep], tensor: str, graph: ModelGraph) -> bool:
    """True when `tensor` already has a 1x1 spatial map"""
    if tensor == 'input':
        return graph.input_shape[1:] == (1, 1)
    for step in steps:
        if step.output == tensor:
            if step.op == 'pool':
                return True
            if step.layer is not None:
                return step.layer.spatial_out == (1, 1)
            return _is_pooled(steps, step.inputs[0], graph)
    return False


def consumers(plan: List[PlanStep]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for step in plan:
        for name in step.inputs:
            counts[name] = counts.get(name, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def _activation_scale(point: str, calib: CalibRecord, policy: QuantPolicy, signed: bool = True,
                      values: Optional[np.ndarray] = None) -> float:
    values = calib.values(point) if values is None else values
    if policy.use_scale_search:
        return search_scale(values, policy.bits, signed)
    absmax = float(np.max(np.abs(values))) if values.size else 0.0
    return float(_positive_scale(absmax, int_range(policy.bits, signed)[1]))


def quantize_model(graph: ModelGraph, calib: CalibRecord, policy: Optional[QuantPolicy] = None,
                   seed: int = 0) -> QuantModel:
    """Derive every layer record and tensor quantizer of a BN-folded graph.

    Args:
        graph: BN-folded model with weights
        calib: statistics from calibrate() on the same graph
        policy: ablation switches (defaults: all techniques on, log2-4 divisors)
        seed: echoed into the dump for reproducibility

    Returns:
        QuantModel
    """
    policy = policy or QuantPolicy()
    plan = build_plan(graph)
    fanout = consumers(plan)
    producers = {step.output: step for step in plan}
    tensors: Dict[str, TensorQuant] = {}
    layers: Dict[str, QuantParams] = {}
    qmax = int_range(policy.bits, True)[1]

    def missing(point):
        if point not in calib.stats:
            raise CalibrationError(f"missing calibration statistics for layer '{point}'")

    # DW inputs eligible for migration and PW inputs eligible for shifting
    migrate, shift = {}, {}
    for step in plan:
        spec = step.layer
        if step.op != 'conv' or spec is None:
            continue
        src = step.inputs[0]
        producer = producers.get(src)
        single = fanout.get(src, 0) == 1 and producer is not None and producer.op == 'conv' \
            and producer.layer.act is not None
        if policy.migration and single and spec.kind is LayerKind.DWCONV and step.block.kind is BlockKind.MBCONV:
            migrate[spec.name] = src
        if policy.shifting and single and spec.kind is LayerKind.PWCONV and spec.groups == 1 \
                and step.block.kind in (BlockKind.MBCONV, BlockKind.DSCONV) \
                and producer.layer.kind is LayerKind.DWCONV:
            shift[spec.name] = src

    # tensor quantizers
    missing('input')
    tensors['input'] = TensorQuant('input', _activation_scale('input', calib, policy))
    migration_factors: Dict[str, Tuple[np.ndarray, float]] = {}
    shift_offsets: Dict[str, np.ndarray] = {}
    for step in plan:
        out = step.output
        missing(out)
        consumer = next((s for s in plan if out in s.inputs and s.op == 'conv'
                         and (s.name in migrate or s.name in shift) and s.inputs[0] == out), None)
        if consumer is not None and consumer.name in migrate:
            stats = calib.stats_for(out)
            m = compute_migration_factors(stats)
            samples = calib.channel_samples(out) / m[:, None]
            s_a = _activation_scale(out, calib, policy, values=samples.ravel())
            migration_factors[consumer.name] = (m, s_a)
            tensors[out] = TensorQuant(out, s_a * m)
        elif consumer is not None and consumer.name in shift:
            stats = calib.stats_for(out)
            c = compute_filter_shift(stats, policy.shift_formula)
            samples = calib.channel_samples(out) - c[:, None]
            s_a = _activation_scale(out, calib, policy, values=samples.ravel())
            shift_offsets[consumer.name] = c
            tensors[out] = TensorQuant(out, s_a, offsets=c)
        else:
            tensors[out] = TensorQuant(out, _activation_scale(out, calib, policy))

    for step in plan:
        spec = step.layer
        if step.op == 'conv':
            layers[spec.name] = _conv_params(graph, spec, step, tensors, calib, policy,
                                             migration_factors.get(spec.name), shift_offsets.get(spec.name), qmax)
        elif step.op == 'attention':
            layers[spec.name] = _attention_params(spec, step, tensors, calib, policy)
    return QuantModel(graph.name, layers, tensors, policy, seed)


def _conv_params(graph: ModelGraph, spec: LayerSpec, step: PlanStep, tensors: Dict[str, TensorQuant],
                 calib: CalibRecord, policy: QuantPolicy, migrated: Optional[Tuple[np.ndarray, float]],
                 c: Optional[np.ndarray], qmax: int) -> QuantParams:
    params = graph.params[spec.name]
    src = tensors[step.inputs[0]]
    out = tensors[step.output]
    weight = params.weight.astype(np.float64)
    bias = params.effective_bias(spec.out_channels).astype(np.float64)
    act_scale, fused = None, None
    m = None
    if migrated is not None:
        m, s_a = migrated
        scaled, fused = apply_channel_migration(weight, s_a, m)
        weight = scaled.data.astype(np.float64)
    else:
        if not src.scalar:
            raise QuantArtifactError(f"{spec.name}: per-channel input without migration")
        act_scale = float(src.scales[0])
    updated = None
    if c is not None:
        updated = update_bias_for_shift(weight, bias, c)
        bias = updated
    w_scales = weight_scales(weight, policy.bits)
    s_in = act_scale if act_scale is not None else float(fused[0] / m[0])
    acc_scales = s_in * w_scales
    pre_scales = None
    if spec.act is not None:
        pre = calib.stats_for(f"{spec.name}.pre")
        pre_scales = _positive_scale(pre.absmax(), qmax)
        dyadic = [dyadic_approx(float(a / p)) for a, p in zip(acc_scales, pre_scales)]
    else:
        if out.offsets is not None:
            raise QuantArtifactError(f"{spec.name}: output offsets need an activation lookup")
        out_scales = np.broadcast_to(out.scales, (spec.out_channels,))
        dyadic = [dyadic_approx(float(a / o)) for a, o in zip(acc_scales, out_scales)]
    return QuantParams(spec.name, QuantScheme.UNIFORM, policy.bits, w_scales, act_scale, fused,
                       m, c, updated, dyadic, step.inputs[0], pre_scales)


def _attention_params(spec: LayerSpec, step: PlanStep, tensors: Dict[str, TensorQuant],
                      calib: CalibRecord, policy: QuantPolicy) -> QuantParams:
    name = spec.name
    for point in ('q', 'k', 'v', 'kv', 'ksum', 'num', 'den'):
        if f"{name}.{point}" not in calib.stats:
            raise CalibrationError(f"missing calibration statistics for layer '{name}' ({point})")
    bits = policy.bits

    def absmax(point):
        return float(calib.stats_for(f"{name}.{point}").absmax().max())

    def unsigned(point):
        return _activation_scale(f"{name}.{point}", calib, policy, signed=False)

    s_q = unsigned('q')
    s_k = unsigned('k')
    s_v = _activation_scale(f"{name}.v", calib, policy)
    s_kv = float(_positive_scale(absmax('kv'), int_range(bits, True)[1]))
    s_ksum = float(_positive_scale(absmax('ksum'), int_range(bits, False)[1]))
    s_out = float(tensors[name].scales[0])
    den_stats = calib.stats_for(f"{name}.den")
    den_max = max(float(den_stats.layer_max), 1e-30)
    num_max = max(absmax('num'), 1e-30)
    lo, hi = policy.log2_clip
    attention = {
        'branches': [float(tensors[src].scales[0]) for src in step.inputs],
        's_q': s_q, 's_k': s_k, 's_v': s_v, 's_kv': s_kv, 's_ksum': s_ksum, 's_out': s_out,
        'num_max': num_max, 'den_max': den_max,
        'clip': [lo, hi], 'rounding': policy.log2_rounding,
        'dividend_bits': policy.dividend_bits,
        'divisor': policy.divisor,
        # exponents of real divisors are centred so the largest lands on `hi`
        'e_center': int(round(math.log2(den_max))) - hi,
    }
    if policy.divisor == "log2-4":
        return QuantParams(name, QuantScheme.LOG2, 4, act_scale=s_q, input=step.inputs[0], attention=attention)
    attention['s_den'] = den_max / int_range(8, False)[1]
    return QuantParams(name, QuantScheme.UNIFORM, 8, act_scale=s_q, input=step.inputs[0], attention=attention)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def migration_mse(x, bits: int = 8) -> Dict[str, float]:
    """Layer-wise quantization error without and with channel-wise migration"""
    a = as_array(x).astype(np.float64)
    qmax = int_range(bits, True)[1]
    shape = _channel_shape(a)
    s = float(_positive_scale(np.abs(a).max(), qmax))
    plain = dequantize(quantize_array(a, s, bits), s)
    m = compute_migration_factors(channel_stats(a)).reshape(shape)
    moved = a / m
    s_m = float(_positive_scale(np.abs(moved).max(), qmax))
    migrated = dequantize(quantize_array(moved, s_m, bits), s_m) * m
    return {'without': _mse(plain, a), 'with': _mse(migrated, a)}


def shifting_mse(x, bits: int = 8) -> Dict[str, float]:
    """Layer-wise quantization error without and with filter-wise shifting"""
    a = as_array(x).astype(np.float64)
    qmax = int_range(bits, True)[1]
    s = float(_positive_scale(np.abs(a).max(), qmax))
    plain = dequantize(quantize_array(a, s, bits), s)
    c = compute_filter_shift(channel_stats(a)).reshape(_channel_shape(a))
    centred = a - c
    s_c = float(_positive_scale(np.abs(centred).max(), qmax))
    shifted = dequantize(quantize_array(centred, s_c, bits), s_c) + c
    return {'without': _mse(plain, a), 'with': _mse(shifted, a)}


def divisor_stress(size: int, seed: int, octaves: float = 12.0) -> np.ndarray:
    """Positive divisors spread log-uniformly over `octaves` powers of two"""
    rng = np.random.default_rng(seed)
    return np.exp2(rng.uniform(-octaves / 2, octaves / 2, size=size))


def divisor_error(divisors, scheme: str, clip: Tuple[int, int] = (LOG2_CLIP_LO, LOG2_CLIP_HI)) -> Dict:
    """Reconstruction error of 1/x under a divisor quantizer.

    Uniform 8-bit maps small divisors to zero, whose reciprocal is undefined;
    those entries are counted and excluded from the error mean.
    """
    x = np.asarray(divisors, dtype=np.float64)
    if np.any(x <= 0):
        raise InvalidValueError("divisors must be positive")
    if scheme == "uniform8":
        step = x.max() / 255.0
        approx = np.clip(np.rint(x / step), 0, 255) * step
    elif scheme == "log2-4":
        lo, hi = clip
        center = int(round(math.log2(x.max()))) - hi
        approx = np.exp2(np.clip(np.rint(np.log2(x)) - center, lo, hi) + center)
    else:
        raise ConfigError(f"unknown divisor scheme '{scheme}'")
    valid = approx > 0
    rel = np.abs(x[valid] / approx[valid] - 1.0)
    return {
        'scheme': scheme,
        'count': int(x.size),
        'zero_mapped': int(np.count_nonzero(~valid)),
        'mean_rel_error': float(rel.mean()) if rel.size else float('inf'),
        'max_rel_error': float(rel.max()) if rel.size else float('inf'),
    }
