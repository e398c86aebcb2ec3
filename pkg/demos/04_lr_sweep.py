"""
Choosing learning rates fairly
==============================

Each trained method gets its own learning rate from a half-decade grid,
picked by mean final eval loss on seeds that are never used for reporting.
A rate that diverges on any tuning seed is discarded.

Run: python3 demos/04_lr_sweep.py   (a few seconds)
"""

import numpy as np

from rankfed.fedsim import TrainConfig, run
from rankfed.synthtask import TaskSpec

GRID = (0.1, 0.3, 1.0, 3.0, 10.0)
TUNE = range(100, 103)

spec = TaskSpec()
data = {s: spec.build(s) for s in TUNE}

for method in ("mole", "smartfed", "scratch_lora"):
    row = {}
    for lr in GRID:
        finals = []
        for s in TUNE:
            base, skills, task = data[s]
            try:
                with np.errstate(all="ignore"):
                    metrics = run(TrainConfig(method=method, lr=lr, k=8, seed=s), [k.module for k in skills], base, task)
            except FloatingPointError:
                finals = None
                break
            finals.append(metrics[-1].eval_loss)
        row[lr] = np.mean(finals) if finals else None
    usable = {lr: v for lr, v in row.items() if v is not None}
    cells = "  ".join(f"{lr:g}:{'diverged' if v is None else f'{v:.4f}'}" for lr, v in row.items())
    print(f"{method:<13} {cells}")
    print(f"{'':<13} -> lr {min(usable, key=usable.get):g}")
