"""
Cycle-level model of the hybrid MAT / R-MAC accelerator

Closed-form per-layer cycle counts, register-level engine models used as
their oracle, tile schedulers for the DW -> PW inter-layer pipeline and the
intra-layer attention pipeline, and the whole-model report.
"""

import math
from collections import deque
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from config import (CLOCK_MHZ, DRAM_BYTES_PER_CYCLE, DSP_PACK, ENGINE_L, ENGINE_M, ENGINE_N, ENGINE_S,
                    ENGINE_T, PHASE_SWITCH_OVERHEAD, REQUANT_DEPTH)
from errors import ConfigError, InternalError, SimulationError
from logger import get_logger
from model_graph import ACT_KINDS, Block, BlockKind, LayerKind, LayerSpec, ModelGraph


class Engine(Enum):
    MAT = "mat"
    RMAC = "rmac"
    ADDER_TREE = "adder_tree"
    SHIFTER = "shifter"


# engines that execute one tile at a time
EXCLUSIVE = (Engine.MAT, Engine.RMAC, Engine.ADDER_TREE)


def _fill(lanes: int) -> int:
    """Adder-tree pipeline depth for `lanes` inputs"""
    return int(math.ceil(math.log2(lanes))) if lanes > 1 else 0


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


class EngineConfig:
    """Accelerator geometry and timing knobs"""

    INT_FIELDS = ('N', 'M', 'T', 'S', 'L', 'dsp_pack', 'phase_switch_overhead', 'requant_depth', 'shifter_width')
    FLOAT_FIELDS = ('clock_mhz', 'dram_bytes_per_cycle')

    def __init__(self, N: int = ENGINE_N, M: int = ENGINE_M, T: int = ENGINE_T, S: int = ENGINE_S,
                 L: int = ENGINE_L, clock_mhz: float = CLOCK_MHZ,
                 dram_bytes_per_cycle: float = DRAM_BYTES_PER_CYCLE, dsp_pack: int = DSP_PACK,
                 phase_switch_overhead: int = PHASE_SWITCH_OVERHEAD, requant_depth: int = REQUANT_DEPTH,
                 shifter_width: Optional[int] = None):
        self.N = N  # R-MACs per lane
        self.M = M  # R-MAC lanes
        self.T = T  # multipliers per MAT lane
        self.S = S  # MAT lanes
        self.L = L  # cores
        self.clock_mhz = float(clock_mhz)
        self.dram_bytes_per_cycle = float(dram_bytes_per_cycle)
        self.dsp_pack = dsp_pack
        self.phase_switch_overhead = phase_switch_overhead
        self.requant_depth = requant_depth
        self.shifter_width = shifter_width if shifter_width is not None else T
        self._validate()

    def _validate(self):
        for key in ('N', 'M', 'T', 'S', 'L', 'dsp_pack', 'shifter_width'):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"engine config: '{key}' must be a positive integer, got {value!r}")
        for key in ('phase_switch_overhead', 'requant_depth'):
            if getattr(self, key) < 0:
                raise ConfigError(f"engine config: '{key}' must be non-negative")
        if not self.clock_mhz > 0 or not self.dram_bytes_per_cycle > 0:
            raise ConfigError("engine config: clock and bandwidth must be positive")

    @property
    def mults_mat(self) -> int:
        return self.T * self.S

    @property
    def mults_rmac(self) -> int:
        return self.N * self.M

    @property
    def total_multipliers(self) -> int:
        return (self.mults_rmac + self.mults_mat) * self.L

    @property
    def peak_gops(self) -> float:
        return self.total_multipliers * 2 * self.clock_mhz / 1e3

    @property
    def dsp_count(self) -> int:
        return _ceil(self.total_multipliers, self.dsp_pack)

    @property
    def fill_mat(self) -> int:
        return _fill(self.T)

    @property
    def fill_rmac(self) -> int:
        return _fill(self.N)

    def replace(self, **overrides) -> "EngineConfig":
        values = self.to_dict()
        for key, value in overrides.items():
            if key not in values:
                raise ConfigError(f"engine config: unknown key '{key}'")
            values[key] = value
        return EngineConfig.from_dict(values)

    def to_dict(self) -> Dict:
        return {key: getattr(self, key) for key in self.INT_FIELDS + self.FLOAT_FIELDS}

    @classmethod
    def from_dict(cls, d: Dict) -> "EngineConfig":
        unknown = set(d) - set(cls.INT_FIELDS + cls.FLOAT_FIELDS)
        if unknown:
            raise ConfigError(f"engine config: unknown keys {sorted(unknown)}")
        values = {}
        try:
            for key, value in d.items():
                values[key] = float(value) if key in cls.FLOAT_FIELDS else int(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"engine config: {e}")
        return cls(**values)


# ---------------------------------------------------------------------------
# Closed-form cycle counts
# ---------------------------------------------------------------------------

class DenseWork:
    """Per-pixel work of a dense layer: groups x (reduce -> cout_g)"""

    def __init__(self, layer: LayerSpec):
        if layer.kind is LayerKind.DWCONV:
            raise SimulationError("depthwise layers map only onto the R-MAC self-accumulation mode", layer.name)
        if layer.kind in (LayerKind.GENERIC_CONV, LayerKind.PWCONV):
            self.groups = layer.groups
            self.reduce = layer.in_channels // layer.groups * layer.kernel ** 2
            self.cout_g = layer.out_channels // layer.groups
        elif layer.kind is LayerKind.MATMUL and not layer.is_attention:
            self.groups = 1
            self.reduce = layer.in_channels
            self.cout_g = layer.out_channels
        else:
            raise SimulationError(f"layer kind '{layer.kind.value}' has no engine mapping", layer.name)
        self.pixels = layer.pixels_out

    @property
    def channel_units(self) -> int:
        """Units split across engines in a channel partition: groups, or output channels"""
        return self.groups if self.groups > 1 else self.cout_g

    def cycles(self, lanes_in: int, lanes_out: int, pixels: Optional[int] = None,
               units: Optional[int] = None) -> int:
        pixels = self.pixels if pixels is None else pixels
        if self.groups > 1:
            groups = self.groups if units is None else units
            cout = self.cout_g
        else:
            groups = 1
            cout = self.cout_g if units is None else units
        if pixels <= 0 or groups <= 0 or cout <= 0:
            return 0
        return groups * _ceil(self.reduce, lanes_in) * _ceil(cout, lanes_out) * pixels


def _dense_units(work: DenseWork, out_channels: Optional[int]) -> Optional[int]:
    if out_channels is None:
        return None
    return _ceil(out_channels, work.cout_g) if work.groups > 1 else out_channels


def cycles_mat(layer: LayerSpec, cfg: EngineConfig, pixels: Optional[int] = None,
               out_channels: Optional[int] = None) -> int:
    """MAT cycles for the whole layer, or a pixel / output-channel share of it.

    ceil(C_in k^2 / T) * ceil(C_out / S) * pixels plus the adder-tree fill.
    """
    work = DenseWork(layer)
    issue = work.cycles(cfg.T, cfg.S, pixels, _dense_units(work, out_channels))
    return issue + cfg.fill_mat if issue else 0


def cycles_rmac_dense(layer: LayerSpec, cfg: EngineConfig, pixels: Optional[int] = None,
                      out_channels: Optional[int] = None) -> int:
    """R-MAC down-forward accumulation mode: the MAT formula with (N, M)"""
    work = DenseWork(layer)
    issue = work.cycles(cfg.N, cfg.M, pixels, _dense_units(work, out_channels))
    return issue + cfg.fill_rmac if issue else 0


def _check_dw(layer: LayerSpec):
    if layer.kind is not LayerKind.DWCONV:
        raise SimulationError(f"self-accumulation mode runs depthwise layers only, got '{layer.kind.value}'",
                              layer.name)
    if layer.kernel not in (3, 5) or layer.stride not in (1, 2):
        raise SimulationError(f"unsupported depthwise kernel {layer.kernel} / stride {layer.stride}", layer.name)


def dw_tile_cycles(layer: LayerSpec, cfg: EngineConfig) -> int:
    """Cycles of one (channel group, output row segment) depthwise tile"""
    return layer.kernel ** 2 + (cfg.phase_switch_overhead if layer.stride == 2 else 0)


def cycles_rmac_dw(layer: LayerSpec, cfg: EngineConfig, channels: Optional[int] = None,
                   rows: Optional[int] = None) -> int:
    """ceil(C/N) * H_out * ceil(W_out/M) * K^2, plus the odd/even phase switch for stride 2"""
    _check_dw(layer)
    h_out, w_out = layer.spatial_out
    channels = layer.out_channels if channels is None else channels
    rows = h_out if rows is None else rows
    return _ceil(channels, cfg.N) * rows * _ceil(w_out, cfg.M) * dw_tile_cycles(layer, cfg)


# ---------------------------------------------------------------------------
# Register-level engine models
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int, groups: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """NCHW -> (N, pixels, groups, C/groups * k * k) in (channel, ky, kx) order"""
    n, c, _, _ = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    win = win.reshape(n, groups, c // groups, ho, wo, kernel, kernel).transpose(0, 3, 4, 1, 2, 5, 6)
    return win.reshape(n, ho * wo, groups, -1), (ho, wo)


class MatEngine:
    """Lanes of multipliers feeding pipelined adder trees.

    Each cycle one chunk of `lanes_in` reduction inputs is broadcast to
    `lanes_out` lanes holding different filters; tree outputs retire
    `depth` cycles later into the output accumulators.
    """

    def __init__(self, lanes_in: int, lanes_out: int):
        self.lanes_in = lanes_in
        self.lanes_out = lanes_out
        self.depth = _fill(lanes_in)

    def stream(self, cols: np.ndarray, wmat: np.ndarray) -> Tuple[np.ndarray, int]:
        """cols (pixels, groups, reduce), wmat (groups, cout_g, reduce) -> (pixels, groups, cout_g), cycles"""
        pixels, groups, reduce = cols.shape
        cout_g = wmat.shape[1]
        acc = np.zeros((pixels, groups, cout_g), dtype=np.int64)
        pipe = deque()
        cycle = 0
        for p in range(pixels):
            for g in range(groups):
                for oc in range(0, cout_g, self.lanes_out):
                    for ic in range(0, reduce, self.lanes_in):
                        tree = wmat[g, oc:oc + self.lanes_out, ic:ic + self.lanes_in] @ cols[p, g, ic:ic + self.lanes_in]
                        pipe.append((cycle + self.depth, p, g, oc, tree))
                        cycle += 1
                        while pipe and pipe[0][0] <= cycle:
                            _, pp, gg, o0, value = pipe.popleft()
                            acc[pp, gg, o0:o0 + value.size] += value
        issued = cycle
        while pipe:
            _, pp, gg, o0, value = pipe.popleft()
            acc[pp, gg, o0:o0 + value.size] += value
        return acc, issued + self.depth if issued else 0

    def run(self, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
            groups: int = 1) -> Tuple[np.ndarray, int]:
        """Convolve one image; returns (NCHW output, cycles)"""
        x = np.asarray(x, dtype=np.int64)
        w = np.asarray(w, dtype=np.int64)
        if x.shape[0] != 1:
            raise SimulationError("register-level models run one image at a time")
        cols, (ho, wo) = _im2col(x, w.shape[2], stride, padding, groups)
        wmat = w.reshape(groups, w.shape[0] // groups, -1)
        acc, cycles = self.stream(cols[0], wmat)
        out = acc.reshape(ho, wo, -1).transpose(2, 0, 1)[None]
        return out, cycles

    def run_matmul(self, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, int]:
        """(m, k) @ (k, n); rows of `a` stream like pixels"""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        acc, cycles = self.stream(a[:, None, :], b.T[None])
        return acc[:, 0, :], cycles


class RMacEngine:
    """Reconfigurable MAC array: `rows` channels by `lanes` output columns.

    Self-accumulation mode keeps partial sums in place while input pixels
    shift one lane per cycle along a row; after K shifts the next kernel row
    is loaded. Stride 2 splits a row into odd and even columns, runs the odd
    phase first, then switches to the even phase.
    """

    def __init__(self, rows: int, lanes: int, phase_switch: int = PHASE_SWITCH_OVERHEAD):
        self.rows = rows
        self.lanes = lanes
        self.phase_switch = phase_switch

    @staticmethod
    def _row(xp: np.ndarray, ch: slice, row: int, start: int, length: int) -> np.ndarray:
        seg = xp[ch, row, start:start + length]
        if seg.shape[-1] < length:
            seg = np.pad(seg, ((0, 0), (0, length - seg.shape[-1])))
        return seg

    def run_dw(self, x: np.ndarray, w: np.ndarray, stride: int = 1) -> Tuple[np.ndarray, int]:
        """Depthwise convolution of one image with 'same' padding; returns (output, cycles)"""
        x = np.asarray(x, dtype=np.int64)
        w = np.asarray(w, dtype=np.int64)
        if x.shape[0] != 1:
            raise SimulationError("register-level models run one image at a time")
        k = w.shape[-1]
        if k not in (3, 5) or stride not in (1, 2):
            raise SimulationError(f"unsupported depthwise kernel {k} / stride {stride}")
        _, c, h, wd = x.shape
        pad = k // 2
        xp = np.pad(x[0], ((0, 0), (pad, pad), (pad, pad)))
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        out = np.zeros((1, c, ho, wo), dtype=np.int64)
        m = self.lanes
        cycle = 0
        for c0 in range(0, c, self.rows):
            ch = slice(c0, min(c0 + self.rows, c))
            kern = w[ch, 0]
            for r in range(ho):
                for j0 in range(0, wo, m):
                    acc = np.zeros((kern.shape[0], m), dtype=np.int64)
                    if stride == 1:
                        for ky in range(k):
                            reg = self._row(xp, ch, r + ky, j0, m + k - 1)
                            for kx in range(k):
                                acc += reg[:, kx:kx + m] * kern[:, ky, kx][:, None]
                                cycle += 1
                    else:
                        for phase in (1, 0):
                            if phase == 0:
                                cycle += self.phase_switch
                            for ky in range(k):
                                reg = self._row(xp, ch, 2 * r + ky, 2 * j0, 2 * m + k)[:, phase::2]
                                for kx in range(phase, k, 2):
                                    q = kx // 2
                                    acc += reg[:, q:q + m] * kern[:, ky, kx][:, None]
                                    cycle += 1
                    width = min(m, wo - j0)
                    out[0, ch, r, j0:j0 + width] = acc[:, :width]
        return out, cycle

    def run_dense(self, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
                  groups: int = 1) -> Tuple[np.ndarray, int]:
        """Down-forward accumulation mode behaves like a MAT with (N, M) lanes"""
        return MatEngine(self.rows, self.lanes).run(x, w, stride, padding, groups)


# ---------------------------------------------------------------------------
# Tile timelines
# ---------------------------------------------------------------------------

class TileOp:
    """One scheduled unit of work on one engine"""

    def __init__(self, op_id: int, engine: Engine, layer: str, tile: Tuple, cost: int, start: int,
                 deps: Sequence["TileOp"] = ()):
        if cost < 1:
            raise InternalError(f"{layer}: tile {tile} has cycle cost {cost}")
        self.op_id = op_id
        self.engine = engine
        self.layer = layer
        self.tile = tuple(tile)
        self.cost = int(cost)
        self.start = int(start)
        self.end = self.start + self.cost
        self.deps = list(deps)

    def to_dict(self) -> Dict:
        return {
            'id': self.op_id,
            'engine': self.engine.value,
            'layer': self.layer,
            'tile': list(self.tile),
            'start': self.start,
            'end': self.end,
            'deps': [d.op_id for d in self.deps],
        }


class Timeline:
    """Ops of one schedule on the most-loaded core"""

    def __init__(self, name: str, drain: int = 0):
        self.name = name
        self.ops: List[TileOp] = []
        self.drain = drain

    def add(self, engine: Engine, layer: str, tile: Tuple, cost: int, start: int,
            deps: Sequence[TileOp] = ()) -> TileOp:
        op = TileOp(len(self.ops), engine, layer, tile, cost, start, deps)
        self.ops.append(op)
        return op

    def extend(self, other: "Timeline", offset: int):
        mapping = {}
        for op in other.ops:
            mapping[op.op_id] = self.add(op.engine, op.layer, op.tile, op.cost, op.start + offset,
                                         [mapping[d.op_id] for d in op.deps])

    @property
    def makespan(self) -> int:
        return max((op.end for op in self.ops), default=0)

    @property
    def cycles(self) -> int:
        """Makespan plus the final requantization drain"""
        return self.makespan + self.drain

    def busy(self, engine: Engine) -> int:
        """Cycles in which the engine does any work"""
        spans = sorted((op.start, op.end) for op in self.ops if op.engine is engine)
        total, reach = 0, None
        for start, end in spans:
            if reach is None or start >= reach:
                total += end - start
                reach = end
            elif end > reach:
                total += end - reach
                reach = end
        return total

    def violations(self) -> List[str]:
        found = []
        for op in self.ops:
            for dep in op.deps:
                if op.start < dep.end:
                    found.append(f"{op.layer}{op.tile} starts at {op.start} before {dep.layer}{dep.tile} ends at {dep.end}")
        for engine in EXCLUSIVE:
            ops = sorted((op for op in self.ops if op.engine is engine), key=lambda o: o.start)
            for prev, cur in zip(ops, ops[1:]):
                if cur.start < prev.end:
                    found.append(f"{engine.value} overlap: {prev.layer}{prev.tile} and {cur.layer}{cur.tile}")
        return found

    def validate(self):
        found = self.violations()
        if found:
            raise InternalError(f"{self.name}: {len(found)} dependency violations, first: {found[0]}")


class LayerCost:
    """Cycles of one layer on the most-loaded core and how the engines share it"""

    def __init__(self, cycles: int, mat: int, rmac: int, split: str):
        self.cycles = cycles
        self.mat = mat
        self.rmac = rmac
        self.split = split


def _balance(units: int, cost_mat: Callable[[int], int], cost_rmac: Callable[[int], int]) -> Tuple[int, int, int]:
    """Split `units` between MAT and R-MAC minimizing the slower engine"""
    best = None
    for u in range(units + 1):
        a, b = cost_mat(u), cost_rmac(units - u)
        if best is None or max(a, b) < best[0]:
            best = (max(a, b), a, b)
    return best


def dense_core_cycles(layer: LayerSpec, cfg: EngineConfig) -> LayerCost:
    """Dense layer split over cores by pixels or output channels, then over both engines"""
    work = DenseWork(layer)

    def mat(pixels=None, units=None):
        issue = work.cycles(cfg.T, cfg.S, pixels, units)
        return issue + cfg.fill_mat if issue else 0

    def rmac(pixels=None, units=None):
        issue = work.cycles(cfg.N, cfg.M, pixels, units)
        return issue + cfg.fill_rmac if issue else 0

    share = _ceil(work.pixels, cfg.L)
    by_pixels = _balance(share, lambda p: mat(pixels=p), lambda p: rmac(pixels=p))
    units = _ceil(work.channel_units, cfg.L)
    by_channels = _balance(units, lambda u: mat(units=u), lambda u: rmac(units=u))
    if by_channels[0] < by_pixels[0]:
        return LayerCost(*by_channels, split='channels')
    return LayerCost(*by_pixels, split='pixels')


def dw_core_cycles(layer: LayerSpec, cfg: EngineConfig) -> LayerCost:
    """Depthwise layer split over cores by channel groups or output rows"""
    groups = _ceil(layer.out_channels, cfg.N)
    by_channels = cycles_rmac_dw(layer, cfg, channels=_ceil(groups, cfg.L) * cfg.N)
    by_rows = cycles_rmac_dw(layer, cfg, rows=_ceil(layer.spatial_out[0], cfg.L))
    if by_channels < by_rows:
        return LayerCost(by_channels, 0, by_channels, 'channels')
    return LayerCost(by_rows, 0, by_rows, 'rows')


def _place_dense(tl: Timeline, layer: LayerSpec, cfg: EngineConfig, start: int) -> int:
    cost = dense_core_cycles(layer, cfg)
    if cost.mat:
        tl.add(Engine.MAT, layer.name, ('all',), cost.mat, start)
    if cost.rmac:
        tl.add(Engine.RMAC, layer.name, ('all',), cost.rmac, start)
    return start + cost.cycles


def _place_dw(tl: Timeline, layer: LayerSpec, cfg: EngineConfig, start: int) -> int:
    cost = dw_core_cycles(layer, cfg)
    tl.add(Engine.RMAC, layer.name, ('all',), cost.cycles, start)
    return start + cost.cycles


def _row_segments(layer: LayerSpec, lanes: int, limit: Optional[int] = None) -> List[int]:
    """Pixel counts of output row segments of at most `lanes` pixels, in raster order up to `limit` pixels"""
    h_out, w_out = layer.spatial_out
    limit = h_out * w_out if limit is None else limit
    segments, taken = [], 0
    for _ in range(h_out):
        for j in range(0, w_out, lanes):
            if taken >= limit:
                return segments
            width = min(lanes, w_out - j, limit - taken)
            segments.append(width)
            taken += width
    return segments


def _chain_timeline(dw: LayerSpec, pw: LayerSpec, cfg: EngineConfig, split: str,
                    dw_cost: Optional[int]) -> Timeline:
    """DW tiles on the R-MAC feeding PW tiles on the MAT; R-MAC joins once DW is done.

    A PW tile is one row segment times one chunk of output channels (S
    channels, or one group of a grouped PW).
    """
    work = DenseWork(pw)
    groups = _ceil(dw.out_channels, cfg.N)
    units = work.channel_units
    if split == 'spatial':
        # contiguous pixel share of the most-loaded core
        segments = _row_segments(dw, cfg.M, _ceil(work.pixels, cfg.L))
    else:
        segments = _row_segments(dw, cfg.M)
        groups = _ceil(groups, cfg.L)
        units = _ceil(units, cfg.L)
    chunk = 1 if work.groups > 1 else cfg.S
    per_tile = dw_tile_cycles(dw, cfg) if dw_cost is None else dw_cost

    tl = Timeline(f"{dw.name}->{pw.name}")
    t = 0
    ready: List[Optional[TileOp]] = []
    for i, _ in enumerate(segments):
        last = None
        for g in range(groups):
            if per_tile:
                last = tl.add(Engine.RMAC, dw.name, (i, g), per_tile, t)
                t = last.end
        ready.append(last)
    free = {Engine.MAT: 0, Engine.RMAC: t}
    lanes = {Engine.MAT: (cfg.T, cfg.S, cfg.fill_mat), Engine.RMAC: (cfg.N, cfg.M, cfg.fill_rmac)}
    filled = set()
    for i, pixels in enumerate(segments):
        dep = ready[i]
        earliest = dep.end if dep is not None else 0
        for c0 in range(0, units, chunk):
            count = min(chunk, units - c0)
            best = None
            for engine in (Engine.MAT, Engine.RMAC):
                lin, lout, fill = lanes[engine]
                cost = work.cycles(lin, lout, pixels, count) + (0 if engine in filled else fill)
                start = max(free[engine], earliest)
                if best is None or start + cost < best[1] + best[2]:
                    best = (engine, start, cost)
            engine, start, cost = best
            filled.add(engine)
            tl.add(engine, pw.name, (i, c0 // chunk), cost, start, [dep] if dep is not None else [])
            free[engine] = start + cost
    return tl


def _place_chain(tl: Timeline, dw: LayerSpec, pw: LayerSpec, cfg: EngineConfig, start: int,
                 dw_cost: Optional[int] = None) -> int:
    if dw_cost == 0:
        # nothing to overlap with
        return _place_dense(tl, pw, cfg, start)
    _check_dw(dw)
    candidates = [_chain_timeline(dw, pw, cfg, split, dw_cost) for split in ('spatial', 'channels')]
    best = min(candidates, key=lambda c: c.makespan)
    tl.extend(best, start)
    return start + best.makespan


def _dw_consumer(layers: List[LayerSpec], i: int) -> Optional[LayerSpec]:
    """The PW layer directly fed by layers[i] when it can join an inter-layer pipeline"""
    if layers[i].kind is not LayerKind.DWCONV or i + 1 >= len(layers):
        return None
    nxt = layers[i + 1]
    return nxt if nxt.kind is LayerKind.PWCONV else None


def schedule_inter_layer(block: Block, cfg: EngineConfig, dw_cost: Optional[int] = None) -> Timeline:
    """Pipelined schedule of an MBConv (PW1 -> DW -> PW2) or DSConv (DW -> PW) block.

    PW tiles start on the MAT as soon as their DW row segment has been
    produced; once the R-MAC finishes DW it takes PW tiles as well.
    `dw_cost` overrides the per-tile DW cost.
    """
    if block.kind not in (BlockKind.MBCONV, BlockKind.DSCONV):
        raise SimulationError(f"inter-layer pipeline needs an MBConv or DSConv block, got '{block.kind.value}'",
                              block.name)
    tl = Timeline(block.name, drain=cfg.requant_depth)
    t = 0
    layers = block.layers
    i = 0
    while i < len(layers):
        pw = _dw_consumer(layers, i)
        if pw is not None:
            t = _place_chain(tl, layers[i], pw, cfg, t, dw_cost) + cfg.requant_depth
            i += 2
            continue
        t = _place_dense(tl, layers[i], cfg, t) + cfg.requant_depth
        i += 1
    tl.drain = 0 if not tl.ops else t - tl.makespan
    tl.validate()
    return tl


class AttentionCosts:
    """Per-head step costs of one attention layer on one core"""

    def __init__(self, layer: LayerSpec, cfg: EngineConfig):
        n, d = layer.tokens, layer.head_dim
        self.heads = _ceil(layer.heads, cfg.L)
        self.tokens = n
        self.dim = d
        # step i: K^T V reduces over tokens
        self.kv = _ceil(n, cfg.N) * _ceil(d, cfg.M) * d
        # step iv: Q k_sum; step iii: Q S
        self.den = {Engine.MAT: _ceil(d, cfg.T) * n, Engine.RMAC: _ceil(d, cfg.N) * n}
        self.num = {Engine.MAT: _ceil(d, cfg.T) * _ceil(d, cfg.S) * n,
                    Engine.RMAC: _ceil(d, cfg.N) * _ceil(d, cfg.M) * n}
        self.fill = {Engine.MAT: cfg.fill_mat, Engine.RMAC: cfg.fill_rmac}
        self.ksum_serial = d * _ceil(n, cfg.shifter_width)
        self.shift_serial = _ceil(n * d, cfg.shifter_width)
        self.shift_drain = _ceil(d, cfg.shifter_width)

    def serial(self, cfg: EngineConfig) -> int:
        """All five steps back to back, head after head"""
        per_head = self.kv + self.ksum_serial + self.den[Engine.MAT] + self.num[Engine.MAT] + self.shift_serial
        return self.heads * per_head + cfg.fill_rmac + cfg.fill_mat + cfg.requant_depth


def _attention_layer(block: Block) -> LayerSpec:
    for layer in block.layers:
        if layer.is_attention:
            return layer
    raise SimulationError("block has no attention layer", block.name)


def _place_attention(tl: Timeline, layer: LayerSpec, cfg: EngineConfig, start: int) -> int:
    costs = AttentionCosts(layer, cfg)
    filled = set()

    def charge(engine: Engine, cost: int) -> int:
        extra = 0 if engine in filled else costs.fill[engine]
        filled.add(engine)
        return cost + extra

    t = start
    step_i = []
    for h in range(costs.heads):
        kv = tl.add(Engine.RMAC, layer.name, (h, 'kv'), charge(Engine.RMAC, costs.kv), t)
        # k_sum accumulates in the adder tree while K streams for step i
        tl.add(Engine.ADDER_TREE, layer.name, (h, 'ksum'), 1, kv.end - 1)
        step_i.append(kv)
        t = kv.end
    free = {Engine.MAT: start, Engine.RMAC: t}
    end = t
    for h in range(costs.heads):
        placed = {}
        for step, table in (('den', costs.den), ('num', costs.num)):
            best = None
            for engine in (Engine.MAT, Engine.RMAC):
                extra = 0 if engine in filled else costs.fill[engine]
                begin = max(free[engine], step_i[h].end)
                cost = table[engine] + extra
                if best is None or begin + cost < best[1] + best[2]:
                    best = (engine, begin, cost)
            engine, begin, cost = best
            filled.add(engine)
            placed[step] = tl.add(engine, layer.name, (h, step), cost, begin, [step_i[h]])
            free[engine] = begin + cost
        den, num = placed['den'], placed['num']
        # the shifter array divides dividends as they leave the engine
        s0 = max(num.start, den.end)
        s1 = max(num.end, s0) + costs.shift_drain
        shift = tl.add(Engine.SHIFTER, layer.name, (h, 'shift'), s1 - s0, s0, [den])
        end = max(end, shift.end)
    return end


def schedule_intra_layer(block: Block, cfg: EngineConfig) -> Timeline:
    """Five-step attention pipeline of a lightweight MSA block on one core.

    Step i (K^T V) runs on the R-MAC head after head while the adder tree
    accumulates k_sum; the MAT runs steps iv then iii of heads whose step i
    is done; the R-MAC takes iii/iv work after its last step i.
    """
    if block.kind is not BlockKind.MSA:
        raise SimulationError(f"intra-layer pipeline needs an MSA block, got '{block.kind.value}'", block.name)
    layer = _attention_layer(block)
    tl = Timeline(layer.name, drain=cfg.requant_depth)
    _place_attention(tl, layer, cfg, 0)
    tl.validate()
    return tl


def standalone_cycles(layer: LayerSpec, cfg: EngineConfig) -> LayerCost:
    """Layer run alone, without overlap with its neighbours"""
    if layer.kind is LayerKind.DWCONV:
        _check_dw(layer)
        return dw_core_cycles(layer, cfg)
    if layer.is_attention:
        costs = AttentionCosts(layer, cfg)
        mat = costs.heads * (costs.den[Engine.MAT] + costs.num[Engine.MAT]) + cfg.fill_mat
        rmac = costs.heads * costs.kv + cfg.fill_rmac
        return LayerCost(costs.serial(cfg) - cfg.requant_depth, mat, rmac, 'heads')
    return dense_core_cycles(layer, cfg)


def serial_block_cycles(block: Block, cfg: EngineConfig) -> int:
    """Every layer of the block alone, each followed by its requantization drain"""
    total = 0
    for layer in _routable(block):
        total += standalone_cycles(layer, cfg).cycles + cfg.requant_depth
    return total


# ---------------------------------------------------------------------------
# Whole-model simulation
# ---------------------------------------------------------------------------

def _routable(block: Block) -> List[LayerSpec]:
    """Layers that occupy an engine; the head concat of an MSA block is free"""
    layers = []
    for layer in block.layers:
        if layer.kind is LayerKind.ATTN_COMBINE and block.kind is BlockKind.MSA:
            continue
        if layer.kind in ACT_KINDS or layer.kind is LayerKind.ATTN_COMBINE:
            raise SimulationError(f"layer kind '{layer.kind.value}' has no engine mapping", layer.name)
        layers.append(layer)
    return layers


def _layer_bytes(layer: LayerSpec) -> int:
    h, w = layer.spatial_in
    moved = layer.in_channels * h * w + layer.out_channels * layer.pixels_out
    if layer.kind in (LayerKind.GENERIC_CONV, LayerKind.PWCONV, LayerKind.DWCONV):
        moved += layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel ** 2
    elif layer.kind is LayerKind.MATMUL and not layer.is_attention:
        moved += layer.in_channels * layer.out_channels
    return moved


class Segment:
    """Consecutive layers scheduled together"""

    def __init__(self, mode: str, layers: List[LayerSpec], timeline: Timeline, serial: int, cfg: EngineConfig):
        self.mode = mode
        self.layers = layers
        self.timeline = timeline
        self.serial = serial
        self.compute = timeline.cycles
        self.bytes = sum(_layer_bytes(layer) for layer in layers)
        self.memory = 0 if math.isinf(cfg.dram_bytes_per_cycle) else int(math.ceil(self.bytes / cfg.dram_bytes_per_cycle))
        self.cycles = max(self.compute, self.memory)
        self.serial = max(serial, self.memory)

    def to_dict(self) -> Dict:
        return {
            'mode': self.mode,
            'layers': [layer.name for layer in self.layers],
            'cycles': self.cycles,
            'serial_cycles': self.serial,
            'bandwidth_bound': self.memory > self.compute,
        }


def _block_segments(block: Block, cfg: EngineConfig) -> List[Segment]:
    layers = _routable(block)
    segments = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        tl = Timeline(layer.name, drain=cfg.requant_depth)
        pw = _dw_consumer(layers, i)
        if pw is not None:
            tl.name = f"{layer.name}->{pw.name}"
            _place_chain(tl, layer, pw, cfg, 0)
            group, mode = [layer, pw], 'inter'
        elif layer.is_attention:
            _place_attention(tl, layer, cfg, 0)
            group, mode = [layer], 'intra'
        elif layer.kind is LayerKind.DWCONV:
            _check_dw(layer)
            _place_dw(tl, layer, cfg, 0)
            group, mode = [layer], 'dw'
        else:
            _place_dense(tl, layer, cfg, 0)
            group, mode = [layer], 'dense'
        tl.validate()
        serial = sum(standalone_cycles(g, cfg).cycles + cfg.requant_depth for g in group)
        segments.append(Segment(mode, group, tl, serial, cfg))
        i += len(group)
    return segments


def _engines_of(layer: LayerSpec, cost: LayerCost) -> List[str]:
    engines = []
    if cost.mat:
        engines.append(Engine.MAT.value)
    if cost.rmac:
        engines.append(Engine.RMAC.value)
    if layer.is_attention:
        engines += [Engine.ADDER_TREE.value, Engine.SHIFTER.value]
    return engines


class SimReport:
    """Timing, throughput and resource figures of one simulated model"""

    def __init__(self, model: str, cfg: EngineConfig, per_layer: List[Dict], segments: List[Segment],
                 macs: int):
        self.model = model
        self.cfg = cfg
        self.per_layer = per_layer
        self.segments = segments
        self.macs = macs
        self.total_cycles = sum(s.cycles for s in segments)
        self.busy = {e: sum(s.timeline.busy(e) for s in segments) for e in Engine}
        self.overlap_saved = sum(s.serial - s.cycles for s in segments)
        slots = (self.busy[Engine.MAT] * cfg.mults_mat + self.busy[Engine.RMAC] * cfg.mults_rmac) * cfg.L
        self.padding_waste = slots - macs

    @property
    def latency_ms(self) -> float:
        return self.total_cycles / (self.cfg.clock_mhz * 1e3)

    @property
    def fps(self) -> float:
        return 1e3 / self.latency_ms if self.total_cycles else 0.0

    @property
    def gops(self) -> float:
        return 2 * self.macs / (self.latency_ms * 1e-3) / 1e9 if self.total_cycles else 0.0

    @property
    def gops_per_dsp(self) -> float:
        return self.gops / self.cfg.dsp_count

    def utilization(self) -> Dict[str, float]:
        total = max(self.total_cycles, 1)
        return {e.value: self.busy[e] / total for e in Engine}

    def to_dict(self) -> Dict:
        return {
            'model': self.model,
            'config': self.cfg.to_dict(),
            'per_layer': self.per_layer,
            'segments': [s.to_dict() for s in self.segments],
            'engines': {e.value: {'busy_cycles': self.busy[e], 'utilization': self.utilization()[e.value]}
                        for e in Engine},
            'totals': {
                'cycles': self.total_cycles,
                'macs': self.macs,
                'latency_ms': self.latency_ms,
                'fps': self.fps,
                'gops': self.gops,
                'peak_gops': self.cfg.peak_gops,
                'dsp': self.cfg.dsp_count,
                'multipliers': self.cfg.total_multipliers,
                'gops_per_dsp': self.gops_per_dsp,
                'overlap_saved_cycles': self.overlap_saved,
                'padding_waste_macs': self.padding_waste,
            },
        }

    def layer_table(self) -> pd.DataFrame:
        df = pd.DataFrame(self.per_layer)
        if not df.empty:
            df['engines'] = df['engines'].apply(lambda e: '+'.join(e) if e else '-')
            df['utilization'] = df['utilization'].round(3)
        return df

    def summary_rows(self) -> Dict[str, object]:
        return {
            'Model': self.model,
            'Cycles': f"{self.total_cycles:,}",
            'Latency (ms)': self.latency_ms,
            'FPS': self.fps,
            'GOPS': self.gops,
            'Peak GOPS': self.cfg.peak_gops,
            'DSPs': self.cfg.dsp_count,
            'GOPS/DSP': self.gops_per_dsp,
            'Overlap saved': f"{self.overlap_saved:,}",
        }


def simulate(graph: ModelGraph, cfg: Optional[EngineConfig] = None) -> SimReport:
    """Cycle-level simulation of one inference.

    Args:
        graph: model (weights not needed)
        cfg: accelerator configuration, defaults from the environment

    Returns:
        SimReport
    """
    cfg = cfg or EngineConfig()
    segments: List[Segment] = []
    per_layer: List[Dict] = []
    macs = 0
    for block in graph.blocks:
        block_segments = _block_segments(block, cfg)
        segments.extend(block_segments)
        for segment in block_segments:
            for layer in segment.layers:
                cost = standalone_cycles(layer, cfg)
                engines = _engines_of(layer, cost)
                lanes = (cfg.mults_mat if cost.mat else 0) + (cfg.mults_rmac if cost.rmac else 0)
                slots = cost.cycles * lanes * cfg.L
                per_layer.append({
                    'name': layer.name,
                    'kind': layer.kind.value,
                    'engines': engines,
                    'segment': segment.mode,
                    'cycles': cost.cycles,
                    'macs': layer.macs,
                    'utilization': min(layer.macs / slots, 1.0) if slots else 0.0,
                })
                macs += layer.macs

    report = SimReport(graph.name, cfg, per_layer, segments, macs)
    if report.padding_waste < 0:
        raise InternalError(f"{graph.name}: issued multiplier slots below MAC count")
    if report.gops > cfg.peak_gops * (1 + 1e-9):
        raise InternalError(f"{graph.name}: {report.gops:.1f} GOPS above peak {cfg.peak_gops:.1f}")
    for engine, value in report.utilization().items():
        if value > 1.0:
            get_logger().warn(f"{graph.name}: {engine} utilization {value:.3f} above 1")
    return report
