"""
Rank experts from scratch
=========================

Walks through what happens when two LoRA modules are composed at one
site: the linear merge and its cross terms, the rank-one view of a module,
and why gating whole modules is a special case of gating rank experts.

Run: python3 demos/01_rank_experts.py
"""

import numpy as np

from rankfed.experts import SiteRouter, build_pool, decompose, more_forward
from rankfed.lora import LoraModule, SiteId, interference_decompose, lora_forward, mole_forward

rng = np.random.default_rng(3)
d, r = 6, 3
site = SiteId(0, "Q")


def module(name):
    return LoraModule(name, r, 2.0 * r, {site: (rng.normal(size=(r, d)), rng.normal(size=(d, r)))})


skill_a, skill_b = module("a"), module("b")
w0 = rng.normal(size=(d, d))
x = rng.normal(size=d)

# ---------------------------------------------------------------------------
# 1. A module is a sum of rank-one experts
# ---------------------------------------------------------------------------
experts = decompose(skill_a, site)
by_parts = w0 @ x + sum(e(x) for e in experts)
print("1. one module, two ways")
print(f"   {len(experts)} experts, scale {experts[0].scale:g} each")
print(f"   max |difference| = {np.abs(by_parts - lora_forward(skill_a, site, w0, x)).max():.2e}\n")

# ---------------------------------------------------------------------------
# 2. Averaging modules produces cross terms
# ---------------------------------------------------------------------------
rep = interference_decompose(skill_a, skill_b, 0.5, 0.5, site, x)
task_norm = sum(np.linalg.norm(t) for t in rep.task_terms)
cross_norm = sum(np.linalg.norm(t) for t in rep.cross_terms)
print("2. linear merge at lambda = 0.5 each")
print(f"   |task terms| = {task_norm:.3f}   |cross terms| = {cross_norm:.3f}")
print("   the cross terms are B_a A_b x and B_b A_a x, neither of which any skill asked for\n")

# ---------------------------------------------------------------------------
# 3. Module gating is rank gating with tied gates
# ---------------------------------------------------------------------------
gates = np.array([0.7, 0.2])
pool = build_pool([skill_a, skill_b], site)
tied = np.repeat(gates, r)
out, _ = more_forward(pool, SiteRouter.zeros(pool.size, d, 1), w0, x, gate_override=tied)
print("3. module gates", gates, "expanded to rank gates", tied)
print(f"   max |difference| = {np.abs(out - mole_forward([skill_a, skill_b], gates, site, w0, x)).max():.2e}")

# untying the gates gives strictly more freedom, e.g. keep only the best expert
scores = np.array([np.linalg.norm(e(x)) for e in pool.experts])
top = pool.experts[scores.argmax()]
share = scores.max() / np.linalg.norm(lora_forward(skill_a if top.source_module == "a" else skill_b, site, 0 * w0, x))
print(f"   the strongest single expert is {top.source_module}[{top.source_rank_index}];"
      f" its output norm is {share:.2f}x that of its whole module")
print("   rank gates can keep it alone, module gates cannot")
