"""Selective copying with a two-layer selective-scan stack.

The data tokens sit at random positions among noise; the model has to emit
them in order after the markers. Reaching 95% takes about 4000 steps,
roughly seven minutes on one core.

Run: python demos/03_copy_task.py [seconds]
"""

import sys

import numpy as np

from mossm.copytask import CopyTaskConfig, make_copy_batch, train_copy_task

cfg = CopyTaskConfig()
tokens, targets = make_copy_batch(CopyTaskConfig(batch=1), np.random.default_rng(0))
print("input  ", tokens[0].tolist())
print("targets", targets[0].tolist())

limit = float(sys.argv[1]) if len(sys.argv) > 1 else 600.0
result = train_copy_task(cfg, log=print, time_limit=limit)
print(f"accuracy {result['accuracy']:.3f} after {result['steps']} steps, {result['seconds']:.0f}s")
