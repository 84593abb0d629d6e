"""
Float reference of the Softmax-free hybrid model

Builds a typed layer graph (stem, MBConv, lightweight MSA, head) from a
declarative JSON config, generates seed-driven synthetic weights, folds
BatchNorm, executes the float forward pass and counts operations.
"""

import json
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import D_HEAD, EPS_DIV
from errors import ConfigError, InvalidValueError, ShapeError
from tensor_core import DType, Tensor, as_array, correlate


class LayerKind(Enum):
    GENERIC_CONV = "conv"
    PWCONV = "pwconv"
    DWCONV = "dwconv"
    MATMUL = "matmul"
    RELU = "relu"
    HSWISH = "hswish"
    ATTN_COMBINE = "attn_combine"  # multi-scale concat feeding the attention


CONV_KINDS = (LayerKind.GENERIC_CONV, LayerKind.PWCONV, LayerKind.DWCONV)
ACT_KINDS = (LayerKind.RELU, LayerKind.HSWISH)


class BlockKind(Enum):
    STEM = "stem"
    DSCONV = "dsconv"
    MBCONV = "mbconv"
    MSA = "msa"
    HEAD = "head"
    LAYER = "layer"


class LayerSpec:
    """One layer with fully resolved shapes"""

    def __init__(self, name: str, kind: LayerKind, in_channels: int, out_channels: int,
                 spatial_in: Tuple[int, int], kernel: int = 1, stride: int = 1,
                 groups: int = 1, has_bn: bool = False, act: Optional[LayerKind] = None,
                 has_bias: bool = True, heads: int = 0, head_dim: int = 0):
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spatial_in = tuple(spatial_in)
        self.kernel = kernel
        self.stride = stride
        self.groups = groups
        self.has_bn = has_bn
        self.act = act
        self.has_bias = has_bias
        self.heads = heads
        self.head_dim = head_dim
        self._validate()

    @property
    def has_act(self) -> bool:
        return self.act is not None

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def is_attention(self) -> bool:
        return self.kind is LayerKind.MATMUL and self.heads > 0

    @property
    def spatial_out(self) -> Tuple[int, int]:
        if self.kind in CONV_KINDS:
            h, w = self.spatial_in
            p = self.padding
            return ((h + 2 * p - self.kernel) // self.stride + 1,
                    (w + 2 * p - self.kernel) // self.stride + 1)
        return self.spatial_in

    @property
    def pixels_out(self) -> int:
        h, w = self.spatial_out
        return h * w

    @property
    def tokens(self) -> int:
        h, w = self.spatial_in
        return h * w

    @property
    def macs(self) -> int:
        """Multiply-accumulates for one image"""
        if self.kind in CONV_KINDS:
            return self.out_channels * self.pixels_out * (self.in_channels // self.groups) * self.kernel ** 2
        if self.is_attention:
            n, d = self.tokens, self.head_dim
            # K^T V, Q S and Q k_sum per head
            return self.heads * n * d * (2 * d + 1)
        if self.kind is LayerKind.MATMUL:
            # generic m x k by k x n, m carried as pixels, k as in_channels
            return self.pixels_out * self.in_channels * self.out_channels
        return 0

    def _validate(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ShapeError(f"{self.name}: channel counts must be positive")
        if any(d <= 0 for d in self.spatial_in):
            raise ShapeError(f"{self.name}: spatial size {self.spatial_in} must be positive")
        if self.stride not in (1, 2):
            raise ShapeError(f"{self.name}: stride {self.stride} not in {{1, 2}}")
        if self.kernel not in (1, 3, 5):
            raise ShapeError(f"{self.name}: kernel {self.kernel} not in {{1, 3, 5}}")
        if self.kind is LayerKind.PWCONV and self.kernel != 1:
            raise ShapeError(f"{self.name}: PWConv requires kernel 1")
        if self.kind is LayerKind.DWCONV:
            if self.in_channels != self.out_channels:
                raise ShapeError(f"{self.name}: DWConv requires in_channels == out_channels")
            self.groups = self.in_channels
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"{self.name}: channels not divisible by groups {self.groups}")
        if self.kind in CONV_KINDS and min(self.spatial_out) <= 0:
            raise ShapeError(f"{self.name}: empty output map")
        if self.is_attention and self.in_channels != 3 * self.heads * self.head_dim:
            raise ShapeError(f"{self.name}: attention expects 3*heads*dim input channels")

    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'kind': self.kind.value,
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'kernel': self.kernel,
            'stride': self.stride,
            'groups': self.groups,
            'spatial_in': list(self.spatial_in),
            'spatial_out': list(self.spatial_out),
            'has_bn': self.has_bn,
            'act': self.act.value if self.act else None,
            'macs': self.macs,
        }


class Block:
    """Ordered layers sharing one residual connection"""

    def __init__(self, name: str, kind: BlockKind, layers: List[LayerSpec],
                 residual: bool = False, stage: int = 0):
        self.name = name
        self.kind = kind
        self.layers = list(layers)
        self.residual = residual
        self.stage = stage

    def layer(self, suffix: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name.endswith('.' + suffix):
                return spec
        raise KeyError(f"{self.name} has no layer '{suffix}'")

    @property
    def in_shape(self) -> Tuple[int, int, int]:
        first = self.layers[0]
        return (first.in_channels,) + first.spatial_in

    @property
    def out_shape(self) -> Tuple[int, int, int]:
        last = self.layers[-1]
        return (last.out_channels,) + last.spatial_out


class LayerParams:
    """Float weights of one layer; bn holds gamma/beta/mean/var/eps arrays"""

    def __init__(self, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                 bn: Optional[Dict[str, np.ndarray]] = None):
        self.weight = weight
        self.bias = bias
        self.bn = bn

    def effective_bias(self, out_channels: int) -> np.ndarray:
        if self.bias is None:
            return np.zeros(out_channels, dtype=np.float32)
        return self.bias


class ModelGraph:
    """Ordered blocks plus per-layer parameters"""

    def __init__(self, name: str, input_shape: Tuple[int, int, int], blocks: List[Block],
                 params: Optional[Dict[str, LayerParams]] = None):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.blocks = list(blocks)
        self.params = params if params is not None else {}

    def layers(self) -> Iterator[LayerSpec]:
        for block in self.blocks:
            yield from block.layers

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers():
            if spec.name == name:
                return spec
        raise KeyError(name)

    def quantizable_layers(self) -> List[LayerSpec]:
        return [s for s in self.layers() if s.kind in CONV_KINDS or s.is_attention]

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self.blocks[-1].out_shape

    def with_params(self, params: Dict[str, LayerParams]) -> "ModelGraph":
        return ModelGraph(self.name, self.input_shape, self.blocks, params)

    def summary(self) -> List[Dict]:
        return [dict(spec.to_dict(), block=block.name, stage=block.stage)
                for block in self.blocks for spec in block.layers]


# ---------------------------------------------------------------------------
# Config loading and graph construction
# ---------------------------------------------------------------------------

def load_config(path: str) -> Dict:
    """Read a model config, reporting JSON errors with line and column"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read model config {path}: {e}")
    try:
        config = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e.msg}", line=e.lineno, column=e.colno)
    config.setdefault('name', path.rsplit('/', 1)[-1].rsplit('.', 1)[0])
    return config


def _require(block: Dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"{where}: missing '{key}'")
    return block[key]


def _positive_int(value, key: str, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise ConfigError(f"{where}: '{key}' must be a positive integer, got {value!r}")
    return value


class _Builder:
    """Tracks the running (C, H, W) while blocks are expanded into layers"""

    def __init__(self, channels: int, resolution: int):
        self.c = channels
        self.h = resolution
        self.w = resolution
        self.blocks: List[Block] = []
        self.stage = 0
        self.counter = 0

    def _name(self, kind: str) -> str:
        name = f"s{self.stage}.b{self.counter}.{kind}"
        self.counter += 1
        return name

    def _conv(self, name, kind, cout, kernel=1, stride=1, groups=1, bn=True, act=None, bias=False):
        spec = LayerSpec(name, kind, self.c, cout, (self.h, self.w), kernel=kernel, stride=stride,
                         groups=groups, has_bn=bn, act=act, has_bias=bias)
        self.c = cout
        self.h, self.w = spec.spatial_out
        return spec

    def stem(self, cfg: Dict, where: str):
        cout = _positive_int(_require(cfg, 'channels', where), 'channels', where)
        kernel = cfg.get('kernel', 3)
        stride = cfg.get('stride', 2)
        name = self._name('stem')
        conv = self._conv(f"{name}.conv", LayerKind.GENERIC_CONV, cout, kernel, stride, act=LayerKind.HSWISH)
        self.blocks.append(Block(name, BlockKind.STEM, [conv], stage=self.stage))
        for _ in range(cfg.get('depth', 1)):
            ds = self._name('dsconv')
            dw = self._conv(f"{ds}.dw", LayerKind.DWCONV, self.c, kernel, 1, act=LayerKind.HSWISH)
            pw = self._conv(f"{ds}.pw", LayerKind.PWCONV, cout)
            self.blocks.append(Block(ds, BlockKind.DSCONV, [dw, pw], residual=True, stage=self.stage))

    def mbconv(self, cfg: Dict, where: str):
        cin = self.c
        cout = _positive_int(cfg.get('channels', cin), 'channels', where)
        expansion = cfg.get('expansion', 4)
        kernel = cfg.get('kernel', 3)
        stride = cfg.get('stride', 1)
        mid = int(round(cin * expansion))
        name = self._name('mbconv')
        pw1 = self._conv(f"{name}.pw1", LayerKind.PWCONV, mid, act=LayerKind.HSWISH)
        dw = self._conv(f"{name}.dw", LayerKind.DWCONV, mid, kernel, stride, act=LayerKind.HSWISH)
        pw2 = self._conv(f"{name}.pw2", LayerKind.PWCONV, cout)
        residual = stride == 1 and cin == cout
        self.blocks.append(Block(name, BlockKind.MBCONV, [pw1, dw, pw2], residual=residual, stage=self.stage))

    def msa(self, cfg: Dict, where: str):
        cin = self.c
        channels = cfg.get('channels', cin)
        if channels != cin:
            raise ConfigError(f"{where}: msa channels {channels} != incoming channels {cin}")
        dim = _positive_int(cfg.get('dim', D_HEAD), 'dim', where)
        if 'heads' in cfg:
            heads = _positive_int(cfg['heads'], 'heads', where)
        else:
            if cin % dim:
                raise ConfigError(f"{where}: channels {cin} not divisible by dim {dim}")
            heads = cin // dim
        kernel = cfg.get('kernel', 5)
        name = self._name('msa')
        total = heads * dim
        qkv = self._conv(f"{name}.qkv", LayerKind.PWCONV, 3 * total, bn=False)
        agg_dw = self._conv(f"{name}.agg_dw", LayerKind.DWCONV, 3 * total, kernel, bn=False)
        agg_pw = self._conv(f"{name}.agg_pw", LayerKind.PWCONV, 3 * total, groups=3 * heads, bn=False)
        hw = (self.h, self.w)
        combine = LayerSpec(f"{name}.combine", LayerKind.ATTN_COMBINE, 3 * total, 6 * total, hw)
        attn = LayerSpec(f"{name}.attn", LayerKind.MATMUL, 6 * total, 2 * total, hw,
                         heads=2 * heads, head_dim=dim)
        self.c = 2 * total
        proj = self._conv(f"{name}.proj", LayerKind.PWCONV, cin)
        self.blocks.append(Block(name, BlockKind.MSA, [qkv, agg_dw, agg_pw, combine, attn, proj],
                                 residual=True, stage=self.stage))

    def head(self, cfg: Dict, where: str):
        widths = cfg.get('channels', [])
        if isinstance(widths, int):
            widths = [widths]
        classes = _positive_int(_require(cfg, 'classes', where), 'classes', where)
        name = self._name('head')
        layers = []
        if widths:
            layers.append(self._conv(f"{name}.conv", LayerKind.PWCONV, widths[0], act=LayerKind.HSWISH))
        # global average pooling
        self.h = self.w = 1
        for i, width in enumerate(widths[1:]):
            layers.append(self._conv(f"{name}.fc{i}", LayerKind.PWCONV, width, bn=False,
                                     act=LayerKind.HSWISH, bias=True))
        layers.append(self._conv(f"{name}.classifier", LayerKind.PWCONV, classes, bn=False, bias=True))
        self.blocks.append(Block(name, BlockKind.HEAD, layers, stage=self.stage))

    def layer(self, cfg: Dict, where: str):
        try:
            kind = LayerKind(_require(cfg, 'kind', where))
        except ValueError:
            raise ConfigError(f"{where}: unknown layer kind {cfg.get('kind')!r}")
        name = self._name(kind.value)
        act = LayerKind(cfg['act']) if cfg.get('act') else None
        if kind in CONV_KINDS:
            cout = self.c if kind is LayerKind.DWCONV else _positive_int(cfg.get('channels', self.c), 'channels', where)
            spec = self._conv(f"{name}.{kind.value}", kind, cout, cfg.get('kernel', 1), cfg.get('stride', 1),
                              bn=cfg.get('bn', False), act=act, bias=True)
        elif kind in ACT_KINDS:
            spec = LayerSpec(f"{name}.{kind.value}", kind, self.c, self.c, (self.h, self.w))
        else:
            raise ConfigError(f"{where}: layer kind '{kind.value}' cannot stand alone")
        self.blocks.append(Block(name, BlockKind.LAYER, [spec], stage=self.stage))


def build_model(config: Dict, seed: int = 0, with_weights: bool = True) -> ModelGraph:
    """Expand a model config into a ModelGraph with resolved shapes.

    Args:
        config: parsed model-config document
        seed: seed for the synthetic weights
        with_weights: skip weight generation for census / simulation use

    Returns:
        ModelGraph (BatchNorm not yet folded)
    """
    if not isinstance(config, dict):
        raise ConfigError("model config must be a JSON object")
    inp = _require(config, 'input', 'config')
    resolution = _positive_int(_require(inp, 'resolution', 'input'), 'resolution', 'input')
    channels = _positive_int(inp.get('channels', 3), 'channels', 'input')
    stages = _require(config, 'stages', 'config')
    if not isinstance(stages, list) or not stages:
        raise ConfigError("config: 'stages' must be a non-empty list")

    builder = _Builder(channels, resolution)
    handlers = {'stem': builder.stem, 'mbconv': builder.mbconv, 'msa': builder.msa,
                'head': builder.head, 'layer': builder.layer}
    try:
        for si, stage in enumerate(stages):
            builder.stage = si
            for bi, block in enumerate(_require(stage, 'blocks', f'stage {si}')):
                where = f"stage {si} block {bi}"
                kind = block.get('type') if isinstance(block, dict) else None
                if kind not in handlers:
                    raise ConfigError(f"{where}: unknown block type {kind!r}")
                handlers[kind](block, where)
    except ShapeError as e:
        raise ConfigError(f"inconsistent shapes: {e}")
    if not builder.blocks:
        raise ConfigError("config describes no blocks")

    graph = ModelGraph(config.get('name', 'model'), (channels, resolution, resolution), builder.blocks)
    if with_weights:
        graph.params = init_weights(graph, seed, config.get('init', {}))
    return graph


def init_weights(graph: ModelGraph, seed: int, init: Optional[Dict] = None) -> Dict[str, LayerParams]:
    """He-normal weights with random BatchNorm statistics.

    `init.channel_span` spreads PW1 output channels geometrically and
    `init.dw_offset` shifts DW outputs per channel, so toy models show the
    inter-channel variation and asymmetry seen in trained networks.
    """
    init = init or {}
    span = float(init.get('channel_span', 1.0))
    offset = float(init.get('dw_offset', 0.0))
    rng = np.random.default_rng(seed)
    params = {}
    for block in graph.blocks:
        for spec in block.layers:
            if spec.kind not in CONV_KINDS:
                continue
            fan_in = (spec.in_channels // spec.groups) * spec.kernel ** 2
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape())
            bias = rng.normal(0.0, 0.05, size=spec.out_channels) if spec.has_bias else None
            bn = None
            if spec.has_bn:
                c = spec.out_channels
                bn = {
                    'gamma': rng.uniform(0.8, 1.2, size=c),
                    'beta': rng.normal(0.0, 0.1, size=c),
                    'mean': rng.normal(0.0, 0.1, size=c),
                    'var': rng.uniform(0.8, 1.2, size=c),
                    'eps': 1e-5,
                }
            spread = block.kind in (BlockKind.MBCONV, BlockKind.DSCONV)
            if spread and span > 1 and spec.name.endswith(('.pw1', '.pw')):
                weight *= (span ** rng.uniform(-0.5, 0.5, size=spec.out_channels))[:, None, None, None]
            if spread and offset > 0 and spec.kind is LayerKind.DWCONV and bn is not None:
                bn['beta'] = bn['beta'] + rng.uniform(0.0, offset, size=spec.out_channels)
            params[spec.name] = LayerParams(
                weight.astype(np.float32),
                None if bias is None else bias.astype(np.float32),
                None if bn is None else {k: (np.asarray(v, dtype=np.float32) if k != 'eps' else v)
                                         for k, v in bn.items()})
    return params


def fold_bn(graph: ModelGraph) -> ModelGraph:
    """Fold BatchNorm into the preceding convolution; has_bn is cleared"""
    folded = {}
    for spec in graph.layers():
        p = graph.params.get(spec.name)
        if p is None:
            continue
        if p.bn is None:
            folded[spec.name] = LayerParams(p.weight.copy(), None if p.bias is None else p.bias.copy())
            continue
        var = np.asarray(p.bn['var'], dtype=np.float64)
        if np.any(var <= 0):
            raise InvalidValueError(f"{spec.name}: BatchNorm variance must be positive")
        scale = np.asarray(p.bn['gamma'], dtype=np.float64) / np.sqrt(var + p.bn.get('eps', 0.0))
        bias = p.effective_bias(spec.out_channels).astype(np.float64)
        weight = p.weight.astype(np.float64) * scale[:, None, None, None]
        bias = (bias - p.bn['mean']) * scale + p.bn['beta']
        folded[spec.name] = LayerParams(weight.astype(np.float32), bias.astype(np.float32))
    blocks = []
    for block in graph.blocks:
        layers = []
        for spec in block.layers:
            clone = LayerSpec(spec.name, spec.kind, spec.in_channels, spec.out_channels, spec.spatial_in,
                              spec.kernel, spec.stride, spec.groups, False, spec.act,
                              spec.has_bias or spec.has_bn, spec.heads, spec.head_dim)
            layers.append(clone)
        blocks.append(Block(block.name, block.kind, layers, block.residual, block.stage))
    return ModelGraph(graph.name, graph.input_shape, blocks, folded)


# ---------------------------------------------------------------------------
# Float execution
# ---------------------------------------------------------------------------

def hswish(x: np.ndarray) -> np.ndarray:
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


ACTIVATIONS = {LayerKind.HSWISH: hswish, LayerKind.RELU: relu}


def split_heads(x: np.ndarray, heads: int, dim: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(N, heads*3*dim, H, W) -> q, k, v each (N, heads, tokens, dim)"""
    n, _, h, w = x.shape
    x = x.reshape(n, heads, 3, dim, h * w).transpose(0, 1, 2, 4, 3)
    return x[:, :, 0], x[:, :, 1], x[:, :, 2]


def merge_heads(x: np.ndarray, spatial: Tuple[int, int]) -> np.ndarray:
    """(N, heads, tokens, dim) -> (N, heads*dim, H, W)"""
    n, heads, _, dim = x.shape
    return x.transpose(0, 1, 3, 2).reshape(n, heads * dim, *spatial)


def linear_attention_heads(q: np.ndarray, k: np.ndarray, v: np.ndarray, eps: float = EPS_DIV,
                           diagnostics: Optional[Dict] = None,
                           observe: Optional[Callable[[str, np.ndarray], None]] = None) -> np.ndarray:
    """ReLU linear attention over (..., tokens, dim) operands"""
    q = relu(q)
    k = relu(k)
    kv = np.einsum('...nd,...ne->...de', k, v)
    ksum = k.sum(axis=-2)
    num = np.einsum('...nd,...de->...ne', q, kv)
    den = np.einsum('...nd,...d->...n', q, ksum)
    zero_rows = int(np.count_nonzero(den == 0))
    if diagnostics is not None:
        diagnostics['zero_denominator_rows'] = diagnostics.get('zero_denominator_rows', 0) + zero_rows
    if observe is not None:
        for point, value in (('q', q), ('k', k), ('v', v), ('kv', kv), ('ksum', ksum), ('num', num), ('den', den)):
            observe(point, value)
    return num / np.maximum(den, eps)[..., None]


def relu_linear_attention(Q, K, V, eps: float = EPS_DIV, diagnostics: Optional[Dict] = None) -> Tensor:
    """A = ReLU(Q)(sum ReLU(K_j)^T V_j) / (ReLU(Q) sum ReLU(K_j)^T) for one head.

    Rows whose denominator is exactly zero are divided by eps instead and
    counted in diagnostics['zero_denominator_rows'].
    """
    q, k, v = (as_array(t).astype(np.float32) for t in (Q, K, V))
    if q.ndim != 2 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"Q, K, V must share a [tokens, d] shape, got {q.shape}, {k.shape}, {v.shape}")
    out = linear_attention_heads(q, k, v, np.float32(eps), diagnostics)
    return Tensor(out.astype(np.float32), DType.F32)


Observer = Callable[[str, np.ndarray], None]


def _run_conv(graph: ModelGraph, spec: LayerSpec, x: np.ndarray, observe: Optional[Observer]) -> np.ndarray:
    p = graph.params[spec.name]
    if p.bn is not None:
        raise ShapeError(f"{spec.name}: fold BatchNorm before execution")
    y = correlate(x, p.weight.astype(x.dtype), spec.stride, spec.padding, spec.groups)
    y = y + p.effective_bias(spec.out_channels).astype(x.dtype)[None, :, None, None]
    if spec.act is not None:
        if observe:
            observe(f"{spec.name}.pre", y)
        y = ACTIVATIONS[spec.act](y)
    if observe:
        observe(spec.name, y)
    return y


def forward_float(graph: ModelGraph, input, capture: bool = False, observer: Optional[Observer] = None,
                  diagnostics: Optional[Dict] = None) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """Run the float reference.

    Args:
        graph: model with folded BatchNorm
        input: NCHW tensor matching graph.input_shape
        capture: record the input activation of every quantizable layer
        observer: callback(point, array) for every named tensor point
        diagnostics: counters updated in place (zero attention denominators)

    Returns:
        (output tensor, captured inputs by layer name)
    """
    x = as_array(input).astype(np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {graph.input_shape}")
    captured: Dict[str, np.ndarray] = {}

    def run(spec: LayerSpec, value: np.ndarray) -> np.ndarray:
        if capture:
            captured[spec.name] = value
        return _run_conv(graph, spec, value, observer)

    if observer:
        observer('input', x)
    for block in graph.blocks:
        identity = x
        if block.kind is BlockKind.MSA:
            qkv_spec, dw_spec, pw_spec, _, attn, proj = block.layers
            qkv = run(qkv_spec, x)
            agg = run(pw_spec, run(dw_spec, qkv))
            multi = np.concatenate([qkv, agg], axis=1)
            if capture:
                captured[attn.name] = multi
            q, k, v = split_heads(multi, attn.heads, attn.head_dim)
            observe = (lambda point, value: observer(f"{attn.name}.{point}", value)) if observer else None
            out = linear_attention_heads(q, k, v, np.float32(EPS_DIV), diagnostics, observe)
            out = merge_heads(out.astype(np.float32), attn.spatial_in)
            if observer:
                observer(attn.name, out)
            x = run(proj, out)
        elif block.kind is BlockKind.HEAD:
            for spec in block.layers:
                if spec.spatial_in == (1, 1) and x.shape[2:] != (1, 1):
                    x = x.mean(axis=(2, 3), keepdims=True)
                    if observer:
                        observer(f"{block.name}.pool", x)
                x = run(spec, x)
        else:
            for spec in block.layers:
                if spec.kind in ACT_KINDS:
                    x = ACTIVATIONS[spec.kind](x)
                    if observer:
                        observer(spec.name, x)
                else:
                    x = run(spec, x)
        if block.residual:
            x = x + identity
            if observer:
                observer(f"{block.name}.add", x)
    return Tensor(x.astype(np.float32), DType.F32), captured


# ---------------------------------------------------------------------------
# Operation census
# ---------------------------------------------------------------------------

CENSUS_KINDS = {
    LayerKind.GENERIC_CONV: 'generic_conv',
    LayerKind.PWCONV: 'pwconv',
    LayerKind.DWCONV: 'dwconv',
    LayerKind.MATMUL: 'matmul',
}


class OpCensus:
    """MAC counts per operation kind"""

    def __init__(self, counts: Dict[str, int], per_block: Optional[Dict[str, int]] = None,
                 per_stage: Optional[Dict[int, int]] = None):
        self.counts = {kind: int(counts.get(kind, 0)) for kind in CENSUS_KINDS.values()}
        self.per_block = per_block or {}
        self.per_stage = per_stage or {}

    @property
    def total_macs(self) -> int:
        return sum(self.counts.values())

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    @property
    def gflops(self) -> float:
        return 2.0 * self.total_macs / 1e9

    def shares(self) -> Dict[str, float]:
        total = self.total_macs
        if total == 0:
            return {kind: 0.0 for kind in self.counts}
        return {kind: 100.0 * count / total for kind, count in self.counts.items()}

    def to_dict(self) -> Dict:
        return {
            'macs': dict(self.counts),
            'shares_percent': self.shares(),
            'total_macs': self.total_macs,
            'gmacs': self.gmacs,
            'gflops': self.gflops,
            'per_block': dict(self.per_block),
            'per_stage': {str(k): v for k, v in self.per_stage.items()},
        }


def op_census(graph: ModelGraph) -> OpCensus:
    counts = {kind: 0 for kind in CENSUS_KINDS.values()}
    per_block, per_stage = {}, {}
    for block in graph.blocks:
        block_macs = 0
        for spec in block.layers:
            if spec.kind in CENSUS_KINDS:
                counts[CENSUS_KINDS[spec.kind]] += spec.macs
                block_macs += spec.macs
        per_block[block.name] = block_macs
        per_stage[block.stage] = per_stage.get(block.stage, 0) + block_macs
    return OpCensus(counts, per_block, per_stage)
