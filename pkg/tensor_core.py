"""
Dense tensor substrate: typed storage, reference float convolution and
matmul, per-channel statistics, synthetic pathology generators and the
TQT1 binary tensor format.
"""

import struct
from enum import Enum
from typing import Dict, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import FormatError, InvalidValueError, ShapeError


class DType(Enum):
    F32 = "f32"
    I8 = "i8"
    I32 = "i32"
    U8 = "u8"

    @property
    def code(self) -> int:
        return _DTYPE_CODES[self]

    @property
    def np_dtype(self):
        return _NP_DTYPES[self]

    @property
    def bounds(self):
        """Inclusive integer range, None for float"""
        if self is DType.F32:
            return None
        info = np.iinfo(self.np_dtype)
        return int(info.min), int(info.max)


_DTYPE_CODES = {DType.F32: 0, DType.I8: 1, DType.I32: 2, DType.U8: 3}
_NP_DTYPES = {DType.F32: np.float32, DType.I8: np.int8, DType.I32: np.int32, DType.U8: np.uint8}


class Tensor:
    """Immutable dense array with an explicit element type"""

    def __init__(self, data, dtype: Union[DType, str, None] = None):
        if isinstance(dtype, str):
            dtype = DType(dtype)
        array = np.asarray(data)
        if dtype is None:
            dtype = _infer_dtype(array)
        if dtype is not DType.F32:
            lo, hi = dtype.bounds
            if array.size and np.issubdtype(array.dtype, np.floating):
                if not np.all(np.isfinite(array)) or np.any(array != np.rint(array)):
                    raise InvalidValueError(f"non-integer values for {dtype.value} tensor")
            if array.size and (array.min() < lo or array.max() > hi):
                raise InvalidValueError(f"values outside {dtype.value} range [{lo}, {hi}]")
        if any(d <= 0 for d in array.shape):
            raise ShapeError(f"zero-sized dimension in shape {array.shape}")
        self._data = np.array(array, dtype=dtype.np_dtype, copy=True)
        self._data.setflags(write=False)
        self.dtype = dtype

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        return self._data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.value})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dtype == other.dtype and self.shape == other.shape and bool(np.array_equal(self._data, other._data))


def _infer_dtype(array: np.ndarray) -> DType:
    for dtype, np_dtype in _NP_DTYPES.items():
        if array.dtype == np_dtype:
            return dtype
    if np.issubdtype(array.dtype, np.integer):
        return DType.I32
    return DType.F32


def as_array(x) -> np.ndarray:
    """Accept a Tensor or anything numpy understands"""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


class ChannelStats:
    """Per-channel and layer-wide extrema of an activation tensor"""

    def __init__(self, per_channel_min: Sequence[float], per_channel_max: Sequence[float]):
        self.per_channel_min = np.asarray(per_channel_min, dtype=np.float64)
        self.per_channel_max = np.asarray(per_channel_max, dtype=np.float64)
        if self.per_channel_min.shape != self.per_channel_max.shape or self.per_channel_min.ndim != 1:
            raise ShapeError("per-channel min/max lists must be 1-D and of equal length")
        if self.per_channel_min.size == 0:
            raise ShapeError("channel statistics need at least one channel")

    @property
    def channels(self) -> int:
        return int(self.per_channel_min.size)

    @property
    def layer_min(self) -> float:
        return float(self.per_channel_min.min())

    @property
    def layer_max(self) -> float:
        return float(self.per_channel_max.max())

    @property
    def layer_range(self) -> float:
        return self.layer_max - self.layer_min

    def channel_ranges(self) -> np.ndarray:
        return self.per_channel_max - self.per_channel_min

    def absmax(self) -> np.ndarray:
        return np.maximum(np.abs(self.per_channel_min), np.abs(self.per_channel_max))

    def merge(self, other: "ChannelStats") -> "ChannelStats":
        """Running extrema over two batches"""
        if other.channels != self.channels:
            raise ShapeError(f"cannot merge stats of {self.channels} and {other.channels} channels")
        return ChannelStats(np.minimum(self.per_channel_min, other.per_channel_min),
                            np.maximum(self.per_channel_max, other.per_channel_max))

    def to_dict(self) -> Dict:
        return {
            'per_channel_min': self.per_channel_min.tolist(),
            'per_channel_max': self.per_channel_max.tolist(),
            'layer_min': self.layer_min,
            'layer_max': self.layer_max,
        }


def correlate(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
              groups: int = 1) -> np.ndarray:
    """Grouped 2-D cross-correlation in the operands' common dtype.

    Args:
        x: NCHW input
        w: OIHW weight with I == C / groups
        stride: spatial stride
        padding: symmetric zero padding
        groups: channel groups (groups == C gives depthwise)

    Returns:
        NCHW output array
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if 0 in x.shape or 0 in w.shape:
        raise ShapeError("zero-sized dimension in conv operands")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight in-channels {cg} != input channels {c} / groups {groups}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1 and groups == 1:
        xs = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.einsum('nchw,oc->nohw', xs, w[:, :, 0, 0])

    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = w.reshape(groups, o // groups, cg, kh, kw)
    out = np.einsum('ngchwij,gocij->ngohw', win, wg, optimize=True)
    return out.reshape(n, o, ho, wo)


def conv2d_ref(input, weight, bias: Optional[Sequence[float]] = None, stride: int = 1,
               padding: int = 0, groups: int = 1) -> Tensor:
    """Float reference convolution (f32 arithmetic)"""
    x = as_array(input).astype(np.float32)
    w = as_array(weight).astype(np.float32)
    out = correlate(x, w, stride, padding, groups)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float32)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias length {b.size} != out channels {w.shape[0]}")
        out = out + b[None, :, None, None]
    return Tensor(out.astype(np.float32), DType.F32)


def matmul_ref(a, b) -> Tensor:
    x = as_array(a).astype(np.float32)
    y = as_array(b).astype(np.float32)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul dims do not agree: {x.shape} x {y.shape}")
    return Tensor(x @ y, DType.F32)


def channel_stats(x) -> ChannelStats:
    """Exact per-channel extrema; channel axis is 1 (NCHW)"""
    array = as_array(x)
    if array.ndim < 2:
        raise ShapeError(f"channel statistics need a channel axis, got shape {array.shape}")
    axes = tuple(i for i in range(array.ndim) if i != 1)
    return ChannelStats(array.min(axis=axes), array.max(axis=axes))


def synth_variation(channels: int, spatial: int, scale_span: float, seed: int) -> Tensor:
    """Channels with geometric range spread: channel c is uniform in
    +-scale_span^(c/(channels-1))."""
    if scale_span < 1:
        raise InvalidValueError(f"scale_span must be >= 1, got {scale_span}")
    if channels < 1 or spatial < 1:
        raise ShapeError("channels and spatial must be positive")
    if channels < 2 and scale_span > 1:
        raise InvalidValueError("a scale spread needs at least two channels")
    rng = np.random.default_rng(seed)
    exponents = np.arange(channels) / max(channels - 1, 1)
    bounds = scale_span ** exponents
    values = rng.uniform(-1.0, 1.0, size=(1, channels, spatial, spatial)) * bounds[None, :, None, None]
    return Tensor(values.astype(np.float32), DType.F32)


def synth_asymmetry(channels: int, spatial: int, offset_span: float, seed: int) -> Tensor:
    """Channels of unit-ish width sitting at random offsets in +-offset_span"""
    if offset_span < 0:
        raise InvalidValueError(f"offset_span must be >= 0, got {offset_span}")
    if channels < 1 or spatial < 1:
        raise ShapeError("channels and spatial must be positive")
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-offset_span, offset_span, size=channels)
    widths = rng.uniform(0.5, 1.5, size=channels)
    values = rng.uniform(-1.0, 1.0, size=(1, channels, spatial, spatial))
    values = values * widths[None, :, None, None] + offsets[None, :, None, None]
    return Tensor(values.astype(np.float32), DType.F32)


def variation_report(stats: ChannelStats) -> Dict:
    """Inter-channel variation and asymmetry diagnostics for one tensor"""
    ranges = stats.channel_ranges()
    positive = ranges[ranges > 0]
    smallest = float(positive.min()) if positive.size else 0.0
    half = np.where(ranges > 0, ranges / 2, 1.0)
    mid = (stats.per_channel_max + stats.per_channel_min) / 2
    return {
        'channels': stats.channels,
        'layer_range': stats.layer_range,
        'min_channel_range': smallest,
        'variation_ratio': stats.layer_range / smallest if smallest > 0 else float('inf'),
        'mean_asymmetry': float(np.mean(np.abs(mid) / half)),
    }


_MAGIC = b"TQT1"


def save_tensor(path: str, tensor: Tensor):
    """Write TQT1: magic, u32 rank, rank x u32 dims, u8 dtype code, LE payload"""
    header = _MAGIC + struct.pack('<I', len(tensor.shape))
    header += struct.pack(f'<{len(tensor.shape)}I', *tensor.shape)
    header += struct.pack('<B', tensor.dtype.code)
    payload = tensor.data.astype(tensor.data.dtype.newbyteorder('<'), copy=False).tobytes(order='C')
    with open(path, 'wb') as f:
        f.write(header + payload)


def load_tensor(path: str) -> Tensor:
    with open(path, 'rb') as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        (rank,) = struct.unpack_from('<I', blob, 4)
        dims = struct.unpack_from(f'<{rank}I', blob, 8)
        (code,) = struct.unpack_from('<B', blob, 8 + 4 * rank)
    except struct.error as e:
        raise FormatError(f"{path}: truncated header ({e})")
    codes = {d.code: d for d in DType}
    if code not in codes:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = codes[code]
    offset = 9 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = count * np.dtype(dtype.np_dtype).itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=np.dtype(dtype.np_dtype).newbyteorder('<'), offset=offset, count=count)
    return Tensor(data.reshape(dims).astype(dtype.np_dtype), dtype)


