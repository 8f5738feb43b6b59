"""Space-filling curve keys and the selective scan on toy inputs.

Run: python demos/01_curves_and_scans.py
"""

import math

import numpy as np

from mossm import serialization as S
from mossm.aggregation import SpatioTemporalCloud
from mossm import ssm

# --- curve keys on the 4x4x4 grid
n = 4
grid = np.array([(x, y, z) for x in range(n) for y in range(n) for z in range(n)])
for pattern in S.ALL_PATTERNS:
    keys = S.curve_key(grid, pattern, bits=2)
    walk = grid[np.argsort(keys)]
    steps = np.abs(np.diff(walk, axis=0)).sum(axis=1)
    print(f"{pattern.value:14s} first cells {walk[:4].tolist()}  max step {steps.max()}")
# hilbert never jumps; z-order does

# --- serialize a small cloud and undo it
rng = np.random.default_rng(0)
pts = np.column_stack([rng.uniform(0, 2, (8, 3)), rng.integers(0, 2, 8)])
cloud = SpatioTemporalCloud(pts, [8])
seq = S.serialize(cloud, "hilbert", grid_size=0.5)
print("order", seq.order.tolist())
print("round trip ok:", np.array_equal(S.deserialize(np.arange(8)[seq.order], seq), np.arange(8)))

# --- zero-order hold: A=-1, delta=ln 2 gives abar = bbar = 0.5
d = ssm.zoh_discretize(-1.0, 1.0, math.log(2.0))
print("abar", d.abar, "bbar", d.bbar)

# --- blocked scan reproduces the sequential one
L, C, N = 300, 4, 4
disc = ssm.DiscretizedParams(rng.uniform(0.5, 0.99, (1, L, C, N)), rng.standard_normal((1, L, C, N)))
x = rng.standard_normal((1, L, C))
Cp = rng.standard_normal((1, L, N))
y_seq = ssm.scan_sequential(disc, x, Cp)
y_blk = ssm.scan_blocked(disc, x, Cp, block=32)
print("max |seq - blocked|", np.abs(y_seq - y_blk).max())
print(ssm.bench_scans(length=1000, channels=4, state=4, repeats=3))
