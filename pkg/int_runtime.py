"""
Bit-exact integer execution of a quantized model

i8 x i8 -> i32 kernels, dyadic requantization, leading-one-detector log2
rounding, shift-division attention, and a float fake-quant executor over
the same lowered program used as the exactness oracle.
"""

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import InternalError, InvalidValueError, QuantArtifactError, ShapeError
from logger import get_logger
from model_graph import ACTIVATIONS, LayerKind, ModelGraph, merge_heads, split_heads
from quant_engine import (PlanStep, QuantModel, build_plan, dyadic_approx, dyadic_value,
                          int_range, quantize_array, quantize_weights)
from tensor_core import DType, Tensor, as_array, correlate

I32_LIMIT = 1 << 31


# ---------------------------------------------------------------------------
# Leading-one detection and log2 rounding
# ---------------------------------------------------------------------------

def lod(x: int) -> int:
    """Index of the most significant set bit (floor(log2(x)))"""
    x = int(x)
    if x <= 0:
        raise InvalidValueError(f"LOD needs a positive integer, got {x}")
    return x.bit_length() - 1


def log2_round(x: int) -> int:
    """LOD index plus the bit just below it"""
    i = lod(x)
    if i == 0:
        return 0
    return i + ((int(x) >> (i - 1)) & 1)


def log2_round_nearest(x: int) -> int:
    """round(log2(x)) with the integer test x^2 >= 2^(2i+1)"""
    i = lod(x)
    x = int(x)
    return i + (1 if x * x >= (1 << (2 * i + 1)) else 0)


def lod_array(x: np.ndarray) -> np.ndarray:
    """Vectorized LOD for positive int64 values"""
    x = np.asarray(x, dtype=np.int64)
    if np.any(x <= 0):
        raise InvalidValueError("LOD needs positive integers")
    out = np.zeros(x.shape, dtype=np.int64)
    for k in range(1, 63):
        out += (x >> k) > 0
    return out


def log2_round_array(x: np.ndarray, rounding: str = "nearest") -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    i = lod_array(x)
    if rounding == "lod":
        below = np.where(i > 0, (x >> np.maximum(i - 1, 0)) & 1, 0)
        return i + below
    if rounding == "nearest":
        if np.any(x >= (1 << 31)):
            raise InvalidValueError("nearest log2 rounding supports values below 2^31")
        return i + (x * x >= (np.int64(1) << (2 * i + 1)))
    raise InvalidValueError(f"unknown log2 rounding '{rounding}'")


class Log2Divisor:
    """Clipped log2 exponents of a divisor tensor"""

    def __init__(self, exponents: np.ndarray, e_s: int, clip: Tuple[int, int], zero_count: int = 0):
        self.exponents = exponents
        self.e_s = e_s
        self.clip = tuple(clip)
        self.zero_count = zero_count

    def reconstruct(self) -> np.ndarray:
        return np.exp2(self.exponents.astype(np.float64))


def quantize_divisor_log2(div, e_s: int, clip: Tuple[int, int] = (-8, 7),
                          rounding: str = "nearest") -> Log2Divisor:
    """exponent = clamp(e_s + log2_round(x), lo, hi); zero divisors map to lo"""
    x = np.asarray(as_array(div), dtype=np.int64)
    if np.any(x < 0):
        raise InvalidValueError("divisors must be non-negative")
    lo, hi = clip
    zero = x == 0
    exps = np.full(x.shape, lo, dtype=np.int64)
    if np.any(~zero):
        exps[~zero] = np.clip(e_s + log2_round_array(x[~zero], rounding), lo, hi)
    return Log2Divisor(exps, e_s, clip, int(np.count_nonzero(zero)))


# ---------------------------------------------------------------------------
# Integer arithmetic primitives
# ---------------------------------------------------------------------------

def round_shift(v: np.ndarray, shift) -> np.ndarray:
    """v / 2^shift rounded half to even; negative shifts multiply exactly"""
    v = np.asarray(v, dtype=np.int64)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.int64), v.shape)
    right = np.clip(shift, 1, 62)
    q = v >> right
    r = v - (q << right)
    half = np.int64(1) << (right - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    down = q + up
    left = np.clip(-shift, 0, 62)
    return np.where(shift > 0, down, v << left)


def _saturate_left(prod: np.ndarray, c: np.ndarray, out_bits: int) -> np.ndarray:
    """Clip before a left shift so the shifted value cannot overflow int64"""
    s = np.clip(-c, 0, 62)
    lim = np.maximum((np.int64(1) << out_bits) >> s, 1)
    return np.where(c < 0, np.clip(prod, -lim, lim), prod)


def requantize_array(acc: np.ndarray, b, c, out_bits: int = 8, signed: bool = True,
                     counters: Optional[Dict] = None) -> np.ndarray:
    """clip(round_half_even(acc * b / 2^c)); b, c broadcast against acc"""
    acc = np.asarray(acc, dtype=np.int64)
    b = np.broadcast_to(np.asarray(b, dtype=np.int64), acc.shape)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), acc.shape)
    if np.any(c < -62):
        raise InvalidValueError("dyadic shift too far left")
    prod = _saturate_left(acc * b, c, out_bits)
    value = round_shift(prod, c)
    lo, hi = int_range(out_bits, signed)
    if counters is not None:
        counters['saturated'] = counters.get('saturated', 0) + int(np.count_nonzero((value < lo) | (value > hi)))
    return np.clip(value, lo, hi)


def requantize(acc, dyadic: Tuple[int, int], out_bits: int = 8, signed: bool = True) -> Tensor:
    b, c = dyadic
    if not 0 < b < (1 << 16):
        raise InvalidValueError(f"dyadic numerator {b} must lie in (0, 2^16)")
    out = requantize_array(as_array(acc), b, c, out_bits, signed)
    dtype = (DType.I8 if signed else DType.U8) if out_bits <= 8 else DType.I32
    return Tensor(out, dtype)


def round_div(n: np.ndarray, d: np.ndarray) -> np.ndarray:
    """n / d rounded half to even for d > 0"""
    n = np.asarray(n, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    q = np.floor_divide(n, d)
    r = n - q * d
    up = (2 * r > d) | ((2 * r == d) & ((q & 1) == 1))
    return q + up


def _check_accumulator(name: str, weight: np.ndarray, bias: np.ndarray, in_max: int = 128):
    per_out = np.abs(weight.reshape(weight.shape[0], -1)).sum(axis=1) * in_max + np.abs(bias)
    if per_out.size and per_out.max() >= I32_LIMIT:
        raise InternalError(f"{name}: accumulator bound {int(per_out.max())} exceeds i32")


def int_conv2d(a, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Exact i8 x i8 convolution with i32 bias, i32 result"""
    x = as_array(a).astype(np.int64)
    k = as_array(w).astype(np.int64)
    b = np.zeros(k.shape[0], dtype=np.int64) if bias is None else np.asarray(as_array(bias), dtype=np.int64)
    if x.size and (x.min() < -128 or x.max() > 255) or k.size and (k.min() < -128 or k.max() > 127):
        raise InvalidValueError("int_conv2d operands must be 8-bit")
    _check_accumulator('int_conv2d', k, b, in_max=int(np.abs(x).max()) if x.size else 0)
    acc = correlate(x, k, stride, padding, groups) + b[None, :, None, None]
    return Tensor(acc, DType.I32)


def int_matmul(a, w, bias=None) -> Tensor:
    x = as_array(a).astype(np.int64)
    k = as_array(w).astype(np.int64)
    if x.ndim != 2 or k.ndim != 2 or x.shape[1] != k.shape[0]:
        raise ShapeError(f"int_matmul dims do not agree: {x.shape} x {k.shape}")
    acc = x @ k
    if bias is not None:
        acc = acc + np.asarray(as_array(bias), dtype=np.int64)[None, :]
    if np.abs(acc).max(initial=0) >= I32_LIMIT:
        raise InternalError("int_matmul accumulator exceeds i32")
    return Tensor(acc, DType.I32)


# ---------------------------------------------------------------------------
# Shift-division attention
# ---------------------------------------------------------------------------

class AttentionParams:
    """Integer constants of one attention layer, derived from its scales"""

    def __init__(self, s_q: float, s_k: float, s_v: float, s_kv: float, s_ksum: float, s_out: float,
                 num_max: float, den_max: float, clip: Tuple[int, int] = (-8, 7), rounding: str = "nearest",
                 dividend_bits: int = 16, divisor: str = "log2-4", e_center: int = 0,
                 branches: Optional[List[float]] = None, s_den: Optional[float] = None):
        self.scales = {'q': s_q, 'k': s_k, 'v': s_v, 'kv': s_kv, 'ksum': s_ksum, 'out': s_out}
        self.clip = tuple(clip)
        self.rounding = rounding
        self.dividend_bits = dividend_bits
        self.divisor = divisor
        self.e_center = e_center
        self.branches = list(branches or [])
        self.entry = [{p: dyadic_approx(s_b / self.scales[p]) for p in ('q', 'k', 'v')} for s_b in self.branches]
        self.kv_rq = dyadic_approx(s_k * s_v / s_kv)
        self.ksum_rq = dyadic_approx(s_k / s_ksum)
        prod = s_q * s_ksum
        e_total = int(round(math.log2(prod)))
        self.e_s = e_total - e_center
        residual = prod / 2.0 ** e_total
        factor = s_q * s_kv / (residual * s_out * 2.0 ** e_center)
        num_int = max(num_max / (s_q * s_kv), 1.0)
        self.guard = int(math.floor(math.log2(((1 << (dividend_bits - 1)) - 1) / (num_int * factor))))
        self.num_rq = dyadic_approx(factor * 2.0 ** self.guard)
        self.s_den = s_den
        if divisor == "uniform8":
            if s_den is None:
                raise QuantArtifactError("uniform divisor needs s_den")
            self.den_rq = dyadic_approx(prod / s_den)
            self.num_u_rq = dyadic_approx(s_q * s_kv / (s_den * s_out))

    @classmethod
    def from_record(cls, record: Dict) -> "AttentionParams":
        try:
            return cls(record['s_q'], record['s_k'], record['s_v'], record['s_kv'], record['s_ksum'],
                       record['s_out'], record['num_max'], record['den_max'], tuple(record['clip']),
                       record.get('rounding', 'nearest'), record.get('dividend_bits', 16),
                       record.get('divisor', 'log2-4'), record.get('e_center', 0),
                       record.get('branches'), record.get('s_den'))
        except KeyError as e:
            raise QuantArtifactError(f"attention record missing {e}")


def attention_int(Qq, Kq, Vq, params: AttentionParams, diagnostics: Optional[Dict] = None,
                  trace: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
    """Five-step integer linear attention over (..., tokens, d) operands.

    Q and K are unsigned (post-ReLU), V signed. Division is a right shift by
    the log2 divisor exponent, or an integer division for the uniform
    8-bit divisor scheme.
    """
    q = as_array(Qq).astype(np.int64)
    k = as_array(Kq).astype(np.int64)
    v = as_array(Vq).astype(np.int64)
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.min(initial=0) < 0 or k.min(initial=0) < 0:
        raise InvalidValueError("Q and K must be non-negative")
    # step i, ii
    kv = np.einsum('...nd,...ne->...de', k, v)
    ksum = k.sum(axis=-2)
    s_q = requantize_array(kv, *params.kv_rq, 8, True)
    ks_q = requantize_array(ksum, *params.ksum_rq, 8, False)
    # step iii, iv
    num = np.einsum('...nd,...de->...ne', q, s_q)
    den = np.einsum('...nd,...d->...n', q, ks_q)
    if trace is not None:
        trace.update({'kv': s_q, 'ksum': ks_q, 'num': num, 'den': den})
    # step v
    if params.divisor == "uniform8":
        den_q = requantize_array(den, *params.den_rq, 8, False)
        num_s = requantize_array(num, *params.num_u_rq, 32, True)
        zero = den_q == 0
        safe = np.where(zero, 1, den_q)[..., None]
        out = np.where(zero[..., None], np.sign(num_s) * 128, round_div(num_s, safe))
        zeros = int(np.count_nonzero(zero))
    else:
        div = quantize_divisor_log2(den, params.e_s, params.clip, params.rounding)
        num16 = requantize_array(num, *params.num_rq, params.dividend_bits, True)
        shift = div.exponents[..., None] + params.guard
        out = round_shift(_saturate_left(num16, shift, 8), shift)
        zeros = div.zero_count
    if diagnostics is not None:
        diagnostics['zero_divisors'] = diagnostics.get('zero_divisors', 0) + zeros
    if zeros:
        get_logger().log(f"attention: {zeros} zero divisors clamped", level="WARN")
    return Tensor(np.clip(out, -128, 127), DType.I8)


# ---------------------------------------------------------------------------
# Lowered integer program
# ---------------------------------------------------------------------------

def activation_quant(pre_q: np.ndarray, pre_scales: np.ndarray, act: LayerKind, offsets: np.ndarray,
                     out_scales: np.ndarray, bits: int = 8) -> np.ndarray:
    """Quantized activation of quantized pre-activations; channel axis 1.

    Shared by the lookup-table builder and the fake-quant executor so both
    evaluate the same float expression.
    """
    shape = [1] * pre_q.ndim
    shape[1] = -1
    real = ACTIVATIONS[act](pre_q * pre_scales.reshape(shape))
    lo, hi = int_range(bits, True)
    return np.clip(np.rint((real - offsets.reshape(shape)) / out_scales.reshape(shape)), lo, hi)


class IntStep:
    """One lowered step with its integer constants"""

    def __init__(self, plan: PlanStep, **consts):
        self.op = plan.op
        self.name = plan.name
        self.inputs = plan.inputs
        self.output = plan.output
        self.layer = plan.layer
        self.consts = consts


class IntModel:
    """Integer program plus the scales the fake-quant oracle needs"""

    def __init__(self, steps: List[IntStep], qmodel: QuantModel, output: str):
        self.steps = steps
        self.qmodel = qmodel
        self.output = output

    def input_scale(self) -> float:
        return float(self.qmodel.tensor('input').scales[0])

    def quantize_input(self, x) -> np.ndarray:
        return quantize_array(as_array(x), self.input_scale(), 8, True)

    def output_scale(self) -> np.ndarray:
        return self.qmodel.tensor(self.output).scales


def _per_channel(values: np.ndarray, channels: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=np.float64), (channels,)).copy()


def lower(graph: ModelGraph, qmodel: QuantModel) -> IntModel:
    """Quantize weights and precompute every integer constant"""
    steps: List[IntStep] = []
    plan = build_plan(graph)
    for step in plan:
        if step.op == 'conv':
            steps.append(_lower_conv(graph, qmodel, step))
        elif step.op == 'add':
            s_out = float(qmodel.tensor(step.output).scales[0])
            pairs = [dyadic_approx(float(qmodel.tensor(src).scales[0]) / s_out) for src in step.inputs]
            steps.append(IntStep(step, pairs=pairs, s_out=s_out))
        elif step.op == 'pool':
            src = _tensor_pixels(plan, step.inputs[0], graph)
            s_in = float(qmodel.tensor(step.inputs[0]).scales[0])
            s_out = float(qmodel.tensor(step.output).scales[0])
            steps.append(IntStep(step, pair=dyadic_approx(s_in / (src * s_out)), s_in=s_in, s_out=s_out))
        elif step.op == 'attention':
            record = qmodel.layer(step.name)
            if record.attention is None:
                raise QuantArtifactError(f"{step.name}: missing attention parameters")
            steps.append(IntStep(step, params=AttentionParams.from_record(record.attention)))
    return IntModel(steps, qmodel, plan[-1].output)


def _tensor_pixels(plan: List[PlanStep], tensor: str, graph: ModelGraph) -> int:
    """Number of pixels of a named tensor"""
    if tensor == 'input':
        return graph.input_shape[1] * graph.input_shape[2]
    for step in plan:
        if step.output == tensor:
            if step.layer is not None:
                return step.layer.pixels_out
            return _tensor_pixels(plan, step.inputs[0], graph)
    raise QuantArtifactError(f"unknown tensor '{tensor}'")


def _lower_conv(graph: ModelGraph, qmodel: QuantModel, step: PlanStep) -> IntStep:
    spec = step.layer
    record = qmodel.layer(spec.name)
    if record.weight_scales is None:
        raise QuantArtifactError(f"{spec.name}: missing weight scales")
    params = graph.params[spec.name]
    weight = params.weight.astype(np.float64)
    if record.migration is not None:
        weight = weight * record.migration[:, None, None, None]
    bias = params.effective_bias(spec.out_channels).astype(np.float64)
    if record.updated_bias is not None:
        bias = record.updated_bias
    w_q = quantize_weights(weight, record.weight_scales).astype(np.int64)
    acc_scales = record.input_scale * record.weight_scales
    bias_q = np.rint(bias / acc_scales).astype(np.int64)
    _check_accumulator(spec.name, w_q, bias_q)
    if len(record.dyadic) != spec.out_channels:
        raise QuantArtifactError(f"{spec.name}: {len(record.dyadic)} dyadic pairs for {spec.out_channels} channels")
    b = np.array([p[0] for p in record.dyadic], dtype=np.int64)
    c = np.array([p[1] for p in record.dyadic], dtype=np.int64)
    consts = {'w_q': w_q, 'bias_q': bias_q, 'b': b, 'c': c, 'acc_scales': acc_scales,
              's_in': record.input_scale, 'w_scales': record.weight_scales}
    if spec.act is not None:
        out = qmodel.tensor(step.output)
        out_scales = _per_channel(out.scales, spec.out_channels)
        offsets = _per_channel(out.offsets if out.offsets is not None else 0.0, spec.out_channels)
        # (256, C) with channels on axis 1, stored as (C, 256)
        grid = np.arange(-128, 128, dtype=np.float64)[:, None]
        table = activation_quant(np.repeat(grid, spec.out_channels, axis=1), record.pre_scales, spec.act,
                                 offsets, out_scales)
        lut = table.T.astype(np.int64)
        consts.update(lut=lut, pre_scales=record.pre_scales, out_scales=out_scales, offsets=offsets)
    return IntStep(step, **consts)


def _cvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(1, -1, 1, 1)


class Executor:
    """Runs an IntModel either in integers or as a float fake-quant simulation"""

    def __init__(self, model: IntModel, fake: bool = False):
        self.model = model
        self.fake = fake
        self.diagnostics: Dict[str, int] = {'zero_divisors': 0, 'saturated': 0}

    def run(self, x_q: np.ndarray) -> Dict[str, np.ndarray]:
        """Execute from quantized input; returns every boundary tensor as integers"""
        values: Dict[str, np.ndarray] = {'input': np.asarray(x_q, dtype=np.int64)}
        for step in self.model.steps:
            if step.op == 'conv':
                self._conv(step, values)
            elif step.op == 'add':
                self._add(step, values)
            elif step.op == 'pool':
                self._pool(step, values)
            elif step.op == 'attention':
                self._attention(step, values)
        return values

    # integer helpers -------------------------------------------------------

    def _requant(self, acc, b, c, bits=8, signed=True):
        if self.fake:
            factor = b.astype(np.float64) * np.exp2(-c.astype(np.float64)) if isinstance(b, np.ndarray) \
                else dyadic_value((b, c))
            lo, hi = int_range(bits, signed)
            return np.clip(np.rint(acc * factor), lo, hi)
        return requantize_array(acc, b, c, bits, signed, self.diagnostics)

    def _conv(self, step: IntStep, values: Dict[str, np.ndarray]):
        k = step.consts
        spec = step.layer
        x = values[step.inputs[0]]
        if self.fake:
            # dequantize in the accumulator view, convolve in float, snap to the accumulator grid
            x_real = x.astype(np.float64) * k['s_in']
            w_real = k['w_q'].astype(np.float64) * k['w_scales'][:, None, None, None]
            real = correlate(x_real, w_real, spec.stride, spec.padding, spec.groups)
            real = real + _cvec(k['bias_q'] * k['acc_scales'])
            acc = np.rint(real / _cvec(k['acc_scales']))
        else:
            acc = correlate(x.astype(np.int64), k['w_q'], spec.stride, spec.padding, spec.groups)
            acc = acc + _cvec(k['bias_q'])
        b, c = _cvec(k['b']), _cvec(k['c'])
        if spec.act is None:
            values[step.output] = self._requant(acc, b, c)
            return
        pre = self._requant(acc, b, c)
        values[f"{step.name}.pre"] = pre
        if self.fake:
            out = activation_quant(pre, k['pre_scales'], spec.act, k['offsets'], k['out_scales'])
        else:
            idx = (pre + 128).astype(np.int64)
            lut = k['lut']
            out = lut[np.arange(lut.shape[0]).reshape(1, -1, 1, 1), idx]
        values[step.output] = out

    def _add(self, step: IntStep, values: Dict[str, np.ndarray]):
        total = 0
        for src, (b, c) in zip(step.inputs, step.consts['pairs']):
            x = values[src]
            if self.fake:
                # dequantize, then snap back onto the operand grid
                s_src = float(self.model.qmodel.tensor(src).scales[0])
                x = np.rint((x * s_src) / s_src)
            total = total + self._requant(x, b, c, 16)
        values[step.output] = np.clip(total, -128, 127)

    def _pool(self, step: IntStep, values: Dict[str, np.ndarray]):
        x = values[step.inputs[0]]
        b, c = step.consts['pair']
        if self.fake:
            s_in = step.consts['s_in']
            acc = np.rint((x * s_in).sum(axis=(2, 3), keepdims=True) / s_in)
        else:
            acc = x.astype(np.int64).sum(axis=(2, 3), keepdims=True)
        values[step.output] = self._requant(acc, b, c)

    def _attention(self, step: IntStep, values: Dict[str, np.ndarray]):
        p: AttentionParams = step.consts['params']
        spec = step.layer
        heads = spec.heads // len(step.inputs)
        parts = {'q': [], 'k': [], 'v': []}
        for src, entry in zip(step.inputs, p.entry):
            q, k, v = split_heads(values[src], heads, spec.head_dim)
            for name, t, signed in (('q', q, False), ('k', k, False), ('v', v, True)):
                parts[name].append(self._requant(t, *entry[name], 8, signed))
        q, k, v = (np.concatenate(parts[n], axis=1) for n in ('q', 'k', 'v'))
        for n, t in (('q', q), ('k', k), ('v', v)):
            values[f"{step.name}.{n}"] = t
        if self.fake:
            out = self._attention_fake(p, q, k, v, step.name, values)
        else:
            trace: Dict[str, np.ndarray] = {}
            out = attention_int(q, k, v, p, self.diagnostics, trace).data.astype(np.int64)
            values[f"{step.name}.kv"] = trace['kv']
            values[f"{step.name}.ksum"] = trace['ksum']
        values[step.output] = merge_heads(out, spec.spatial_in)

    def _attention_fake(self, p: AttentionParams, q, k, v, name: str, values) -> np.ndarray:
        s = p.scales
        q_r, k_r, v_r = q * s['q'], k * s['k'], v * s['v']
        kv = np.rint(np.einsum('...nd,...ne->...de', k_r, v_r) / (s['k'] * s['v']))
        ksum = np.rint(k_r.sum(axis=-2) / s['k'])
        kv_q = np.clip(np.rint(kv * dyadic_value(p.kv_rq)), -128, 127)
        ks_q = np.clip(np.rint(ksum * dyadic_value(p.ksum_rq)), 0, 255)
        values[f"{name}.kv"] = kv_q
        values[f"{name}.ksum"] = ks_q
        num = np.rint(np.einsum('...nd,...de->...ne', q_r, kv_q * s['kv']) / (s['q'] * s['kv']))
        den = np.rint(np.einsum('...nd,...d->...n', q_r, ks_q * s['ksum']) / (s['q'] * s['ksum']))
        if p.divisor == "uniform8":
            den_q = np.clip(np.rint(den * dyadic_value(p.den_rq)), 0, 255)
            lo, hi = int_range(32, True)
            num_s = np.clip(np.rint(num * dyadic_value(p.num_u_rq)), lo, hi)
            zero = den_q == 0
            out = np.where(zero[..., None], np.sign(num_s) * 128, np.rint(num_s / np.where(zero, 1, den_q)[..., None]))
            return np.clip(out, -128, 127)
        lo, hi = p.clip
        safe = np.maximum(den, 1.0)
        if p.rounding == "nearest":
            rounded = np.rint(np.log2(safe))
        else:
            i = np.floor(np.log2(safe))
            rounded = i + np.where(i > 0, np.floor(safe / np.exp2(i - 1)) % 2, 0)
        e = np.where(den == 0, lo, np.clip(p.e_s + rounded, lo, hi))
        half = 1 << (p.dividend_bits - 1)
        num16 = np.clip(np.rint(num * dyadic_value(p.num_rq)), -half, half - 1)
        out = np.rint(num16 / np.exp2(e[..., None] + p.guard))
        return np.clip(out, -128, 127)


class InferenceResult:
    def __init__(self, logits: Tensor, boundaries: Dict[str, np.ndarray], diagnostics: Dict,
                 crosscheck: Optional[Dict] = None):
        self.logits = logits
        self.boundaries = boundaries
        self.diagnostics = diagnostics
        self.crosscheck = crosscheck


def compare_boundaries(int_values: Dict[str, np.ndarray], fake_values: Dict[str, np.ndarray]) -> Dict:
    """Exact comparison of every named tensor both executors produced"""
    mismatches = {}
    for name, value in int_values.items():
        other = fake_values.get(name)
        if other is None or other.shape != value.shape:
            mismatches[name] = int(value.size)
            continue
        diff = int(np.count_nonzero(value.astype(np.int64) != other.astype(np.int64)))
        if diff:
            mismatches[name] = diff
    return {
        'bit_exact': not mismatches,
        'tensors_compared': len(int_values),
        'mismatches': mismatches,
    }


def forward_int(graph: ModelGraph, qmodel: QuantModel, input, crosscheck: bool = False,
                model: Optional[IntModel] = None) -> InferenceResult:
    """Integer-only inference from an i8 input.

    Args:
        graph: BN-folded float graph the quant records were derived from
        qmodel: quantization records
        input: i8 NCHW tensor (see IntModel.quantize_input)
        crosscheck: also run the float fake-quant executor and compare
        model: pre-lowered program to reuse across calls

    Returns:
        InferenceResult with i32 logits (final tensor's integer codes)
    """
    model = model or lower(graph, qmodel)
    x_q = np.asarray(as_array(input), dtype=np.int64)
    if x_q.ndim != 4 or tuple(x_q.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input shape {x_q.shape} does not match model input {graph.input_shape}")
    if x_q.min() < -128 or x_q.max() > 127:
        raise InvalidValueError("integer input must be i8")
    executor = Executor(model)
    values = executor.run(x_q)
    report = None
    if crosscheck:
        fake = Executor(model, fake=True).run(x_q)
        report = compare_boundaries(values, fake)
    out = values[model.output]
    logits = Tensor(out.reshape(out.shape[0], -1).astype(np.int32), DType.I32)
    return InferenceResult(logits, values, dict(executor.diagnostics), report)


def dequantize_output(model: IntModel, logits: Tensor) -> np.ndarray:
    scales = model.output_scale()
    values = logits.data.astype(np.float64)
    if scales.size == 1:
        return values * scales[0]
    return values * np.repeat(scales, values.shape[1] // scales.size)[None, :]


