"""
Four ways to use two pretrained skills
======================================

Builds the default synthetic composite task and trains each method with
the federated simulator: the static linear merge, module-level gating,
rank-level gating with adaptive quotas, and a fresh LoRA trained from
zero. Learning rates are the ones the held-out sweep picks (see 04).

Run: python3 demos/03_compare_methods.py [seed]
"""

import sys

import numpy as np

from rankfed.fedsim import TrainConfig, run
from rankfed.synthtask import TaskSpec

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = TaskSpec()
base, skills, task = spec.build(seed)
modules = [s.module for s in skills]

methods = {"linear_merge": 0.0, "mole": 0.3, "smartfed": 3.0, "scratch_lora": 3.0}
history = {}
for method, lr in methods.items():
    history[method] = run(TrainConfig(method=method, lr=lr, k=8, seed=seed), modules, base, task)

threshold = history["linear_merge"][0].eval_loss
print(f"seed {seed}, threshold = linear merge eval loss {threshold:.4f}\n")
print(f"{'method':<14}{'final eval':>12}{'round hit':>11}{'bytes to hit':>14}")
for method, metrics in history.items():
    spent, hit = 0, None
    for m in metrics:
        spent += m.uplink_bytes + m.downlink_bytes
        if m.eval_loss <= threshold:
            hit = m.round
            break
    print(f"{method:<14}{metrics[-1].eval_loss:>12.4f}{str(hit):>11}{spent if hit is not None else '-':>14}")

# a crude text plot of the learning curves
print("\neval loss by round (every 4th)")
for method in ("mole", "smartfed", "scratch_lora"):
    losses = np.array([m.eval_loss for m in history[method]])
    print(f"  {method:<13}", " ".join(f"{v:.3f}" for v in losses[::4]))
