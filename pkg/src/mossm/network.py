"""Serialized point U-Net with time-gated embedding and motion-aware SSM blocks.

Features of every level live in a canonical point order (sorted by batch,
voxel, t). Each block gathers them into the serialized order of its curve
pattern, works along that sequence, and scatters the result back.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import SpatioTemporalCloud, VoxelGrid, devoxelize, voxelize
from .errors import CheckpointMismatch, CountMismatch, ShapeMismatch
from .serialization import ALL_PATTERNS, Pattern, parse_pattern, pattern_for_block, serialize_grid
from .ssm import init_ssm_params, selective_scan_tape

__all__ = [
    "StagePlan",
    "TCBEConfig",
    "MSSMConfig",
    "Level",
    "NetInput",
    "Module",
    "TCBE",
    "MSSM",
    "Block",
    "MOSNet",
    "ra_indices",
    "reversed_aggregation",
    "inverse_reversed_aggregation",
    "cross_product_attention",
    "gated_output",
    "prepare_input",
    "model_forward",
    "save_model",
    "load_model",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass
class StagePlan:
    enc_depths: tuple = (2, 2, 2, 6, 2)
    dec_depths: tuple = (2, 2, 2, 2)
    widths: tuple = (32, 64, 128, 256, 256)
    pool_factor: int = 2
    patterns: tuple = tuple(p.value for p in ALL_PATTERNS)
    num_classes: int = 3
    state_size: int = 16
    expand: int = 2
    kernel: int = 3
    mlp_ratio: int = 2
    use_d: bool = True
    time_mode: str = "normalized"   # or "raw"
    coord_scale: float = 10.0
    pos_radius: int = 4
    scan_block: int = 64
    seed: int = 0

    def __post_init__(self):
        self.enc_depths = tuple(int(d) for d in self.enc_depths)
        self.dec_depths = tuple(int(d) for d in self.dec_depths)
        self.widths = tuple(int(w) for w in self.widths)
        self.patterns = tuple(parse_pattern(p).value for p in self.patterns)
        if len(self.widths) != len(self.enc_depths):
            raise ValueError("need one width per encoder stage")
        if len(self.dec_depths) != len(self.enc_depths) - 1:
            raise ValueError("decoder must have one stage fewer than the encoder")
        if not self.patterns:
            raise ValueError("at least one serialization pattern is required")

    @classmethod
    def toy(cls, widths=(8, 16), depths=None, **kw) -> "StagePlan":
        depths = depths or (1,) * len(widths)
        return cls(enc_depths=tuple(depths), dec_depths=(1,) * (len(widths) - 1), widths=tuple(widths), **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TCBEConfig:
    channels: int
    spatial_kernel: int = 3
    temporal_kernel: int = 3
    fusion_kernel: int = 3


@dataclass
class MSSMConfig:
    channels: int
    state_size: int = 16
    upper_kernel: int = 3
    middle_kernel: int = 3
    expand: int = 2
    use_d: bool = True
    scan_block: int = 64

    @property
    def inner(self) -> int:
        return self.channels * self.expand


# ---------------------------------------------------------------- level bookkeeping

def ra_indices(t_seq: np.ndarray, batch_seq: np.ndarray):
    """Split a sequence into per-(batch, scan) rows, keeping sequence order inside rows.

    Returns ``idx`` (G, N_p) of sequence slots (-1 = padding), ``inv`` mapping
    each slot to its flat position ``g * N_p + j`` and the row lengths.
    """
    t_seq = np.asarray(t_seq, dtype=np.int64)
    batch_seq = np.asarray(batch_seq, dtype=np.int64)
    n = len(t_seq)
    if n == 0:
        return np.zeros((0, 0), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    key = batch_seq * (int(t_seq.max()) + 1) + t_seq
    _, gid = np.unique(key, return_inverse=True)
    gid = gid.ravel()
    order = np.argsort(gid, kind="stable")
    counts = np.bincount(gid)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n_p = int(counts.max())
    pos = np.arange(n) - starts[gid[order]]
    idx = np.full((len(counts), n_p), -1, dtype=np.int64)
    idx[gid[order], pos] = order
    inv = np.empty(n, dtype=np.int64)
    inv[order] = gid[order] * n_p + pos
    return idx, inv, counts


def _counts_matrix(counts_per_scan, B, F, N):
    counts = np.asarray(counts_per_scan, dtype=np.int64)
    if counts.ndim == 1:
        counts = np.tile(counts, (B, 1))
    if counts.shape != (B, F):
        raise CountMismatch(f"expected counts of shape ({B}, {F}), got {counts.shape}")
    if np.any(counts.sum(axis=1) != N):
        raise CountMismatch("per-scan counts do not sum to the sequence length")
    return counts


def reversed_aggregation(f_I, counts_per_scan, F: int):
    """(B, N, C) sequence with contiguous scans -> ((B*F, N_p, C), mask)."""
    f_I = T._as_tensor(f_I)
    B, N, C = f_I.shape
    counts = _counts_matrix(counts_per_scan, B, F, N)
    t_seq = np.concatenate([np.repeat(np.arange(F), c) for c in counts])
    batch_seq = np.repeat(np.arange(B), N)
    idx, _, lengths = _ra_full(t_seq, batch_seq, B, F)
    out = T.gather_rows(T.reshape(f_I, (B * N, C)), idx)
    mask = idx >= 0
    return out, mask


def _ra_full(t_seq, batch_seq, B, F):
    # like ra_indices but keeps empty scans as all-padding rows so the layout is B*F
    n = len(t_seq)
    row = batch_seq * F + t_seq
    order = np.argsort(row, kind="stable")
    counts = np.bincount(row, minlength=B * F)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n_p = max(int(counts.max()) if n else 0, 1)
    pos = np.arange(n) - starts[row[order]]
    idx = np.full((B * F, n_p), -1, dtype=np.int64)
    idx[row[order], pos] = order
    inv = np.empty(n, dtype=np.int64)
    inv[order] = row[order] * n_p + pos
    return idx, inv, counts


def inverse_reversed_aggregation(f_S, counts_per_scan, F: int, N: int):
    """Undo :func:`reversed_aggregation`: ((B*F, N_p, C)) -> (B, N, C)."""
    f_S = T._as_tensor(f_S)
    BF, n_p, C = f_S.shape
    B = BF // F
    counts = _counts_matrix(counts_per_scan, B, F, N)
    t_seq = np.concatenate([np.repeat(np.arange(F), c) for c in counts])
    batch_seq = np.repeat(np.arange(B), N)
    _, inv, _ = _ra_full(t_seq, batch_seq, B, F)
    flat = T.reshape(f_S, (BF * n_p, C))
    return T.reshape(T.take(flat, inv), (B, N, C))


@dataclass
class SeqInfo:
    order: np.ndarray
    inverse: np.ndarray
    segment: np.ndarray     # batch id per slot
    reset: np.ndarray       # 1.0 where a new batch element starts
    ra_idx: np.ndarray
    ra_inv: np.ndarray
    ra_len: np.ndarray
    relfeat: np.ndarray     # (M, 10) neighbour offsets in sequence order


class Level:
    """Points of one resolution level: integer grid coords, scan index, batch id."""

    def __init__(self, grid: np.ndarray, t: np.ndarray, batch: np.ndarray, num_scans: int, pos_radius: int = 4):
        self.grid = np.asarray(grid, dtype=np.int64)
        self.t = np.asarray(t, dtype=np.int64)
        self.batch = np.asarray(batch, dtype=np.int64)
        self.num_scans = num_scans
        self.pos_radius = pos_radius
        self._seq: dict[Pattern, SeqInfo] = {}

    def __len__(self):
        return len(self.t)

    def seq(self, pattern) -> SeqInfo:
        pattern = parse_pattern(pattern)
        if pattern not in self._seq:
            self._seq[pattern] = self._build(pattern)
        return self._seq[pattern]

    def _build(self, pattern: Pattern) -> SeqInfo:
        s = serialize_grid(self.grid, self.t, self.batch, pattern)
        seg = self.batch[s.order]
        t = self.t[s.order]
        g = self.grid[s.order]
        reset = np.zeros(len(seg))
        if len(seg):
            reset[0] = 1.0
            reset[1:] = seg[1:] != seg[:-1]
        idx, inv, lengths = ra_indices(t, seg)
        return SeqInfo(s.order, s.inverse, seg, reset, idx, inv, lengths, self._relfeat(g, t, seg))

    def _relfeat(self, g, t, seg):
        r = float(self.pos_radius)
        tscale = max(self.num_scans - 1, 1)
        feats = []
        for off in (-1, 1):
            nb_g = np.roll(g, -off, axis=0)
            nb_t = np.roll(t, -off)
            nb_s = np.roll(seg, -off)
            valid = nb_s == seg
            if off < 0:
                valid[0] = False
            else:
                valid[-1] = False
            d = np.clip(nb_g - g, -r, r) / r
            same = np.all(nb_g == g, axis=1)
            feats += [d * valid[:, None], ((nb_t - t) / tscale * valid)[:, None], (same & valid)[:, None]]
        return np.concatenate(feats, axis=1).astype(np.float64)

    def pool(self, factor: int = 2):
        """Coarser level keyed on (batch, grid // factor, t); returns (level, parent index)."""
        pg = np.floor_divide(self.grid, factor)
        keys = np.column_stack([self.batch, pg, self.t])
        uniq, parent = np.unique(keys, axis=0, return_inverse=True)
        coarse = Level(uniq[:, 1:4], uniq[:, 4], uniq[:, 0], self.num_scans, self.pos_radius)
        return coarse, parent.ravel()


@dataclass
class NetInput:
    levels: list
    parents: list            # parents[s] maps level s points to level s+1
    coords: np.ndarray       # (M0, 3) scaled positions, canonical order
    times: np.ndarray        # (M0, 1)
    grid: VoxelGrid | None = None


def _shift_min(grid, batch):
    out = np.empty_like(grid)
    for b in np.unique(batch):
        m = batch == b
        out[m] = grid[m] - grid[m].min(axis=0)
    return out


def prepare_input(reps: SpatioTemporalCloud, voxel_grid: VoxelGrid, plan: StagePlan) -> NetInput:
    """Build all pyramid levels for voxel representatives ``reps``."""
    F = max(reps.num_scans, int(reps.t.max()) + 1 if len(reps) else 1)
    grid0 = _shift_min(voxel_grid.coords, reps.batch) if len(reps) else voxel_grid.coords
    levels = [Level(grid0, reps.t, reps.batch, F, plan.pos_radius)]
    parents = []
    for _ in range(len(plan.widths) - 1):
        coarse, parent = levels[-1].pool(plan.pool_factor)
        levels.append(coarse)
        parents.append(parent)
    t = reps.points[:, 3:4].copy()
    if plan.time_mode == "normalized" and F > 1:
        t = t / (F - 1)
    return NetInput(levels, parents, reps.xyz / plan.coord_scale, t, voxel_grid)


# ---------------------------------------------------------------- modules

class Module:
    """Parameter container; parameters are discovered by walking attributes."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, T.Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, T.BatchNormState):
                yield f"{full}.mean", val, "mean"
                yield f"{full}.var", val, "var"
            elif isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self._set_mode(mode)
        return self

    def eval(self):
        return self.train(False)

    def _set_mode(self, mode):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, T.BatchNormState):
                val.training = mode
            elif isinstance(val, Module):
                val._set_mode(mode)
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        item._set_mode(mode)

    def zero_(self):
        """Set every parameter to zero (used to build identity blocks in tests)."""
        for p in self.parameters():
            p.data[...] = 0.0
        return self


def _w(rng, shape, fan_in, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), shape)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, scale=1.0):
        self.weight = T.parameter(_w(rng, (cin, cout), cin, scale))
        self.bias = T.parameter(np.zeros(cout), no_decay=True) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, cin, cout, k, rng, scale=1.0):
        self.weight = T.parameter(_w(rng, (k, cin, cout), k * cin, scale))
        self.bias = T.parameter(np.zeros(cout), no_decay=True)

    def __call__(self, x, segment_ids=None, row_lengths=None):
        return T.conv1d(x, self.weight, self.bias, segment_ids=segment_ids, row_lengths=row_lengths)


class DWConv1d(Module):
    def __init__(self, c, k, rng, scale=1.0):
        self.weight = T.parameter(_w(rng, (k, c), k, scale))
        self.bias = T.parameter(np.zeros(c), no_decay=True)

    def __call__(self, x, segment_ids=None):
        return T.depthwise_conv1d(x, self.weight, self.bias, segment_ids=segment_ids)


class LayerNorm(Module):
    def __init__(self, c):
        self.gamma = T.parameter(np.ones(c), no_decay=True)
        self.beta = T.parameter(np.zeros(c), no_decay=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    def __init__(self, c):
        self.gamma = T.parameter(np.ones(c), no_decay=True)
        self.beta = T.parameter(np.zeros(c), no_decay=True)
        self.state = T.BatchNormState(np.zeros(c), np.ones(c))

    def __call__(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.state)


class TCBE(Module):
    """Embedding where temporal features gate spatial ones before fusion."""

    def __init__(self, cfg: TCBEConfig, rng):
        c = cfg.channels
        self.spatial = Conv1d(3, c, cfg.spatial_kernel, rng)
        self.temporal = Conv1d(1, c, cfg.temporal_kernel, rng)
        self.temporal_trend = Conv1d(c, c, cfg.temporal_kernel, rng)
        self.fusion = Conv1d(c, c, cfg.fusion_kernel, rng)
        self.norm = BatchNorm(c)

    def __call__(self, coords, times, segment_ids=None, return_parts: bool = False):
        if coords.shape[-1] != 3 or times.shape[-1] != 1 or coords.shape[:-1] != times.shape[:-1]:
            raise ShapeMismatch("TCBE expects coords (..., N, 3) and times (..., N, 1)")
        f_s = self.spatial(coords, segment_ids)
        f_t = self.temporal(times, segment_ids)
        f_cou = f_s + f_t
        f_t2 = self.temporal_trend(f_t, segment_ids)
        f_tgs = f_t2 * f_s
        f_cou2 = f_cou + f_tgs
        out = T.silu(self.norm(self.fusion(f_cou2, segment_ids)))
        if return_parts:
            return out, {"f_s": f_s, "f_t": f_t, "f_cou": f_cou, "f_t_trend": f_t2, "f_tgs": f_tgs, "f_cou2": f_cou2}
        return out


def cross_product_attention(f_m, f_a):
    """Sigmoid(f_M) * f_A + f_M."""
    return T.add(T.mul(T.sigmoid(f_m), f_a), f_m)


def gated_output(ssm_out, gate, out_proj: Linear):
    return out_proj(T.mul(ssm_out, gate))


class MSSM(Module):
    """Single-scan appearance branch + multi-scan branch fused into a gated SSM."""

    def __init__(self, cfg: MSSMConfig, rng):
        c, e = cfg.channels, cfg.inner
        self.cfg = cfg
        self.upper = Conv1d(c, e, cfg.upper_kernel, rng)
        self.middle = Conv1d(c, e, cfg.middle_kernel, rng)
        self.gate = Linear(c, e, rng)
        p = init_ssm_params(e, cfg.state_size, rng, use_d=cfg.use_d)
        self.A_log = T.parameter(p.A_log, no_decay=True)
        self.W_delta = T.parameter(p.W_delta)
        self.delta_bias = T.parameter(p.delta_bias, no_decay=True)
        self.W_B = T.parameter(p.W_B)
        self.W_C = T.parameter(p.W_C)
        self.D = T.parameter(p.D, no_decay=True) if cfg.use_d else None
        self.out = Linear(e, c, rng, scale=0.5)

    def ssm(self, u, reset=None):
        """Selective scan over one (M, E) sequence."""
        y = selective_scan_tape(T.reshape(u, (1,) + u.shape), self.A_log, self.W_delta, self.delta_bias,
                                self.W_B, self.W_C, self.D, reset=reset, block=self.cfg.scan_block)
        return T.reshape(y, u.shape)

    def __call__(self, f_i, info: SeqInfo, return_parts: bool = False):
        """``f_i`` is (M, C) in sequence order described by ``info``."""
        m, c = f_i.shape
        if c != self.cfg.channels:
            raise ShapeMismatch(f"MSSM expects {self.cfg.channels} channels, got {c}")
        e = self.cfg.inner
        # upper branch: per-scan rows, conv never reads padding
        rows = T.gather_rows(f_i, info.ra_idx)
        f_a_rows = T.silu(self.upper(rows, row_lengths=info.ra_len))
        g, n_p = info.ra_idx.shape
        f_a = T.take(T.reshape(f_a_rows, (g * n_p, e)), info.ra_inv)
        f_m = self.middle(f_i, segment_ids=info.segment)
        f_mg = cross_product_attention(f_m, f_a)
        y = self.ssm(T.silu(f_mg), reset=info.reset)
        f_g = T.silu(self.gate(f_i))
        out = gated_output(y, f_g, self.out)
        if return_parts:
            return out, {"f_A": f_a, "f_M": f_m, "f_MG": f_mg, "ssm": y, "f_G": f_g}
        return out


class PosEnc(Module):
    """Depthwise conv along the sequence plus an MLP of neighbour voxel offsets."""

    def __init__(self, c, k, rng, rel_dim=10):
        self.conv = DWConv1d(c, k, rng, scale=0.5)
        self.fc1 = Linear(rel_dim, c, rng)
        self.fc2 = Linear(c, c, rng, scale=0.5)

    def __call__(self, x, info: SeqInfo):
        return self.conv(x, info.segment) + self.fc2(T.silu(self.fc1(info.relfeat)))


class MLP(Module):
    def __init__(self, c, ratio, rng):
        self.fc1 = Linear(c, c * ratio, rng)
        self.fc2 = Linear(c * ratio, c, rng, scale=0.5)

    def __call__(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class Block(Module):
    """x + PosEnc(x), then pre-norm MSSM and MLP, each with a residual."""

    def __init__(self, c, plan: StagePlan, rng):
        self.pos = PosEnc(c, plan.kernel, rng)
        self.norm1 = LayerNorm(c)
        self.mssm = MSSM(MSSMConfig(c, plan.state_size, plan.kernel, plan.kernel, plan.expand,
                                    plan.use_d, plan.scan_block), rng)
        self.norm2 = LayerNorm(c)
        self.mlp = MLP(c, plan.mlp_ratio, rng)

    def forward_seq(self, xs, info: SeqInfo):
        xs = xs + self.pos(xs, info)
        xs = xs + self.mssm(self.norm1(xs), info)
        return xs + self.mlp(self.norm2(xs))

    def __call__(self, x, level: Level, pattern):
        info = level.seq(pattern)
        xs = T.take(x, info.order, permutation=True)
        return T.take(self.forward_seq(xs, info), info.inverse, permutation=True)


class Pool(Module):
    def __init__(self, cin, cout, rng):
        self.proj = Linear(cin, cout, rng)
        self.norm = LayerNorm(cout)

    def __call__(self, x, parent, n_parent):
        return T.silu(self.norm(T.segment_max(self.proj(x), parent, n_parent)))


class Unpool(Module):
    def __init__(self, c_coarse, c_fine, rng):
        self.proj = Linear(c_coarse, c_fine, rng)
        self.proj_skip = Linear(c_fine, c_fine, rng)

    def __call__(self, x_coarse, skip, parent):
        return T.take(self.proj(x_coarse), parent) + self.proj_skip(skip)


class MOSNet(Module):
    def __init__(self, plan: StagePlan, rng=None):
        rng = np.random.default_rng(plan.seed if rng is None else rng)
        self.plan = plan
        w = plan.widths
        self.embed = TCBE(TCBEConfig(w[0], plan.kernel, plan.kernel, plan.kernel), rng)
        self.enc = [[Block(w[s], plan, rng) for _ in range(d)] for s, d in enumerate(plan.enc_depths)]
        self.pools = [Pool(w[s - 1], w[s], rng) for s in range(1, len(w))]
        self.unpools = [Unpool(w[s + 1], w[s], rng) for s in range(len(w) - 1)]
        self.dec = [[Block(w[s], plan, rng) for _ in range(d)] for s, d in enumerate(plan.dec_depths)]
        self.head_norm = LayerNorm(w[0])
        self.head = Linear(w[0], plan.num_classes, rng)

    # nested block lists are flattened for parameter discovery
    def named_parameters(self, prefix: str = ""):
        yield from self._walk(prefix, "named_parameters")

    def named_buffers(self, prefix: str = ""):
        yield from self._walk(prefix, "named_buffers")

    def _walk(self, prefix, method):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from getattr(val, method)(f"{prefix}{name}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    items = item if isinstance(item, list) else [item]
                    for j, sub in enumerate(items):
                        tag = f"{prefix}{name}.{i}." + (f"{j}." if isinstance(item, list) else "")
                        yield from getattr(sub, method)(tag)

    def _set_mode(self, mode):
        self.training = mode
        for val in vars(self).values():
            if isinstance(val, Module):
                val._set_mode(mode)
            elif isinstance(val, list):
                for item in val:
                    for sub in (item if isinstance(item, list) else [item]):
                        sub._set_mode(mode)

    def blocks(self):
        for stage in self.enc + self.dec[::-1]:
            yield from stage

    def __call__(self, inp: NetInput):
        """Per-voxel logits (M0, num_classes) in canonical voxel order."""
        plan = self.plan
        lv0 = inp.levels[0]
        info0 = lv0.seq(pattern_for_block(0, plan.patterns))
        x = self.embed(inp.coords[info0.order], inp.times[info0.order], info0.segment)
        x = T.take(x, info0.inverse, permutation=True)
        k = 0
        skips = []
        for s, stage in enumerate(self.enc):
            if s > 0:
                x = self.pools[s - 1](x, inp.parents[s - 1], len(inp.levels[s]))
            for blk in stage:
                x = blk(x, inp.levels[s], pattern_for_block(k, plan.patterns))
                k += 1
            skips.append(x)
        for s in range(len(self.dec) - 1, -1, -1):
            x = self.unpools[s](x, skips[s], inp.parents[s])
            for blk in self.dec[s]:
                x = blk(x, inp.levels[s], pattern_for_block(k, plan.patterns))
                k += 1
        return self.head(self.head_norm(x))


def model_forward(cloud: SpatioTemporalCloud, model: MOSNet, grid_size: float):
    """Voxelize, run the network, and return per-original-point logits (N, K)."""
    reps, grid = voxelize(cloud, grid_size)
    logits = model(prepare_input(reps, grid, model.plan))
    return T.take(logits, grid.point_to_voxel)


# ---------------------------------------------------------------- checkpoints

def _state_arrays(model: Module) -> dict:
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    for name, st, attr in model.named_buffers():
        arrays[f"buffer/{name}"] = getattr(st, attr)
    return arrays


def save_model(path, model: MOSNet, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    """Write parameters, buffers and metadata into one .npz container."""
    arrays = _state_arrays(model)
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    header = {"version": CHECKPOINT_VERSION, "config_digest": model.plan.digest(),
              "plan": model.plan.to_dict(), "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return header, arrays


def load_model(path, plan: StagePlan | None = None, model: MOSNet | None = None):
    """Load a checkpoint; refuses when the stored config digest differs from ``plan``."""
    header, arrays = read_checkpoint(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {header.get('version')}")
    if plan is None:
        plan = model.plan if model is not None else StagePlan(**header["plan"])
    if plan.digest() != header["config_digest"]:
        raise CheckpointMismatch("checkpoint was written for a different model configuration")
    model = model or MOSNet(plan)
    for name, p in model.named_parameters():
        p.data[...] = arrays[f"param/{name}"]
    for name, st, attr in model.named_buffers():
        setattr(st, attr, arrays[f"buffer/{name}"].copy())
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, header, extra
