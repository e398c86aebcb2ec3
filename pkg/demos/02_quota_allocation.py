"""
Expert quotas under a budget
============================

Each adapted site reports a cumulative score. Scores become shares via a
softmax, and the global top-K budget is split into integer per-site quotas,
capped at the number of experts the site actually has.

Run: python3 demos/02_quota_allocation.py
"""

import numpy as np

from rankfed.eeqa import allocate_quotas, initial_uniform_allocation, normalize_scores

# the hand example: three sites, budget 10, four experts per site
alloc = allocate_quotas([0.5, 0.3, 0.2], budget=10, cap=4)
print("shares [0.5, 0.3, 0.2], budget 10, cap 4")
print("   floors       ", [int(np.floor(a * 10)) for a in (0.5, 0.3, 0.2)], "(first capped to 4)")
print("   quotas       ", list(alloc.quotas), "leftover", alloc.leftover)

# a budget bigger than the sites can hold is reported, not silently dropped
alloc = allocate_quotas([0.6, 0.4], budget=12, cap=4)
print("\nbudget 12 over two sites of 4 experts")
print("   quotas       ", list(alloc.quotas), "leftover", alloc.leftover)

# reserving a minimum per site before the proportional split
alloc = allocate_quotas([0.9, 0.05, 0.05], budget=12, cap=8, min_quota=2)
print("\nskewed shares with min_quota = 2")
print("   quotas       ", list(alloc.quotas))

# scores to shares: small score gaps barely move the split
print("\nhow score gaps map to quotas (4 sites, top-8 each so budget 32, 16 experts each)")
print("   uniform start", list(initial_uniform_allocation(4, 8).quotas))
for gap in (0.05, 0.5, 1.0, 2.0):
    s = np.array([gap, 0.0, 0.0, 0.0])
    q = allocate_quotas(normalize_scores(s), 32, 16).quotas
    print(f"   gap {gap:<4g}     ", list(q))
