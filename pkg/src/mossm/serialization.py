"""Space-filling-curve ordering of 4D clouds.

Four patterns are supported: z-order (Morton), Hilbert, and their transposed
variants that swap the x and y axes before encoding. Serialization sorts points
by the composite key (batch, curve key, t) with t in the lowest position, so the
same voxel seen in different scans lands in consecutive sequence slots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CoordinateOutOfRange, EmptyPatternList, LengthMismatch

__all__ = [
    "Pattern",
    "SerializedSequence",
    "morton_encode",
    "hilbert_encode",
    "curve_key",
    "grid_coordinates",
    "serialize",
    "serialize_grid",
    "deserialize",
    "pattern_for_block",
    "parse_pattern",
]

DEFAULT_BITS = 16


class Pattern(str, enum.Enum):
    Z = "z"
    Z_TRANS = "z-trans"
    HILBERT = "hilbert"
    HILBERT_TRANS = "hilbert-trans"

    @property
    def transposed(self) -> bool:
        return self in (Pattern.Z_TRANS, Pattern.HILBERT_TRANS)

    @property
    def base(self) -> "Pattern":
        return {Pattern.Z_TRANS: Pattern.Z, Pattern.HILBERT_TRANS: Pattern.HILBERT}.get(self, self)


ALL_PATTERNS = (Pattern.Z, Pattern.Z_TRANS, Pattern.HILBERT, Pattern.HILBERT_TRANS)

_ALIASES = {
    "z": Pattern.Z, "zorder": Pattern.Z, "morton": Pattern.Z,
    "z-trans": Pattern.Z_TRANS, "zt": Pattern.Z_TRANS, "z_trans": Pattern.Z_TRANS,
    "hilbert": Pattern.HILBERT, "h": Pattern.HILBERT,
    "hilbert-trans": Pattern.HILBERT_TRANS, "ht": Pattern.HILBERT_TRANS, "hilbert_trans": Pattern.HILBERT_TRANS,
}


def parse_pattern(name) -> Pattern:
    if isinstance(name, Pattern):
        return name
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown serialization pattern {name!r}") from None


def _check_coords(gx, gy, gz, bits):
    if bits < 1 or 3 * bits > 48:
        raise CoordinateOutOfRange(f"bits={bits} outside [1, 16]")
    arrs = [np.asarray(a, dtype=np.int64) for a in (gx, gy, gz)]
    for a in arrs:
        if a.size and (a.min() < 0 or a.max() >= (1 << bits)):
            raise CoordinateOutOfRange(f"grid coordinate outside [0, 2**{bits})")
    return [a.astype(np.uint64) for a in np.broadcast_arrays(*arrs)]


def _maybe_scalar(key, inputs):
    return int(key) if all(np.ndim(a) == 0 for a in inputs) else key


def morton_encode(gx, gy, gz, bits: int = DEFAULT_BITS):
    """Interleave bits; within each triplet x is least significant, then y, then z."""
    x, y, z = _check_coords(gx, gy, gz, bits)
    key = np.zeros(x.shape, dtype=np.uint64)
    one = np.uint64(1)
    for b in range(bits):
        sh = np.uint64(b)
        key |= ((x >> sh) & one) << np.uint64(3 * b)
        key |= ((y >> sh) & one) << np.uint64(3 * b + 1)
        key |= ((z >> sh) & one) << np.uint64(3 * b + 2)
    return _maybe_scalar(key, (gx, gy, gz))


def hilbert_encode(gx, gy, gz, bits: int = DEFAULT_BITS):
    """3D Hilbert index via Skilling's axes-to-transpose construction."""
    X = [a.copy() for a in _check_coords(gx, gy, gz, bits)]
    n = 3
    q = 1 << (bits - 1)
    while q > 1:
        p = np.uint64(q - 1)
        uq = np.uint64(q)
        for i in range(n):
            hit = (X[i] & uq) != 0
            swap = (X[0] ^ X[i]) & p
            # hit: invert low bits of X[0]; otherwise exchange low bits of X[0] and X[i]
            x0 = np.where(hit, X[0] ^ p, X[0] ^ swap)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ swap)
            X[0] = x0
        q >>= 1
    for i in range(1, n):
        X[i] ^= X[i - 1]
    t = np.zeros_like(X[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((X[n - 1] & np.uint64(q)) != 0, t ^ np.uint64(q - 1), t)
        q >>= 1
    for i in range(n):
        X[i] ^= t
    key = np.zeros_like(X[0])
    one = np.uint64(1)
    for b in range(bits - 1, -1, -1):
        for i in range(n):
            key = (key << one) | ((X[i] >> np.uint64(b)) & one)
    return _maybe_scalar(key, (gx, gy, gz))


def curve_key(grid: np.ndarray, pattern, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Curve key of integer grid coordinates ``(M, 3)`` under ``pattern``."""
    pattern = parse_pattern(pattern)
    grid = np.asarray(grid, dtype=np.int64).reshape(-1, 3)
    gx, gy, gz = grid[:, 0], grid[:, 1], grid[:, 2]
    if pattern.transposed:
        gx, gy = gy, gx
    enc = morton_encode if pattern.base is Pattern.Z else hilbert_encode
    return np.asarray(enc(gx, gy, gz, bits), dtype=np.uint64).reshape(-1)


@dataclass(frozen=True)
class SerializedSequence:
    order: np.ndarray    # sequence slot -> original point index
    inverse: np.ndarray  # original point index -> sequence slot
    pattern: Pattern
    keys: np.ndarray | None = None  # spatial curve key per sequence slot

    def __len__(self) -> int:
        return len(self.order)


def grid_coordinates(xyz: np.ndarray, grid_size: float, batch: np.ndarray | None = None) -> np.ndarray:
    """Voxel indices shifted so each batch element starts at the origin."""
    g = np.floor(np.asarray(xyz, dtype=np.float64) / grid_size).astype(np.int64)
    if len(g) == 0:
        return g.reshape(0, 3)
    if batch is None:
        return g - g.min(axis=0)
    out = np.empty_like(g)
    for b in np.unique(batch):
        m = batch == b
        out[m] = g[m] - g[m].min(axis=0)
    return out


def serialize_grid(grid: np.ndarray, t, batch, pattern, bits: int = DEFAULT_BITS) -> SerializedSequence:
    """Order integer grid points by (batch, curve key, t); ties keep input order."""
    pattern = parse_pattern(pattern)
    n = len(grid)
    keys = curve_key(grid, pattern, bits)
    t = np.zeros(n, np.int64) if t is None else np.asarray(t, np.int64)
    batch = np.zeros(n, np.int64) if batch is None else np.asarray(batch, np.int64)
    # lexsort is stable: ties keep input order
    order = np.lexsort((t, keys, batch))
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return SerializedSequence(order, inverse, pattern, keys[order])


def serialize(cloud, pattern, grid_size: float, bits: int = DEFAULT_BITS) -> SerializedSequence:
    if len(cloud) == 0:
        raise ValueError("cannot serialize an empty cloud")
    grid = grid_coordinates(cloud.xyz, grid_size, cloud.batch)
    return serialize_grid(grid, cloud.t, cloud.batch, pattern, bits)


def deserialize(seq_values, seq: SerializedSequence):
    """Put per-slot values back into original point order."""
    if len(seq_values) != len(seq.order):
        raise LengthMismatch(f"{len(seq_values)} values for a sequence of {len(seq.order)}")
    if isinstance(seq_values, np.ndarray):
        return seq_values[seq.inverse]
    return [seq_values[i] for i in seq.inverse]


def pattern_for_block(block_index: int, patterns) -> Pattern:
    patterns = list(patterns)
    if not patterns:
        raise EmptyPatternList("at least one serialization pattern is required")
    return parse_pattern(patterns[block_index % len(patterns)])
