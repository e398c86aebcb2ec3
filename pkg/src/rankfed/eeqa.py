"""Elastic expert quota allocation.

Per-site cumulative importance is softmax-normalized into shares, and a
global budget of active experts is split in two passes: floor of each
share (capped per site), then the remainder handed out greedily to the
highest-share sites that still have room.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .numcore import as_vector, softmax


@dataclass(frozen=True)
class QuotaAllocation:
    quotas: Tuple[int, ...]
    budget: int
    cap: int
    leftover: int = 0

    def __post_init__(self):
        object.__setattr__(self, "quotas", tuple(int(q) for q in self.quotas))
        if any(q < 0 or q > self.cap for q in self.quotas):
            raise ValueError(f"quota outside [0, {self.cap}]: {self.quotas}")

    @property
    def n_sites(self):
        return len(self.quotas)

    def __iter__(self):
        return iter(self.quotas)

    def __getitem__(self, j):
        return self.quotas[j]


def normalize_scores(s_sum):
    return softmax(s_sum)


def allocate_quotas(alphas, budget, cap, min_quota=0, tol=1e-9):
    alphas = as_vector(alphas, "alphas")
    if alphas.size == 0:
        raise ValueError("no sites to allocate")
    if abs(alphas.sum() - 1.0) > tol:
        raise ValueError(f"alphas sum to {alphas.sum()!r}, expected 1")
    if budget < 1 or cap < 1:
        raise ValueError("budget and cap must be >= 1")
    if not 0 <= min_quota <= cap:
        raise ValueError("min_quota must lie in [0, cap]")

    if min_quota:
        # reserve the floor everywhere, then split what is left of the budget
        reserve = min_quota * alphas.size
        if reserve > budget:
            raise ValueError(f"min_quota={min_quota} over {alphas.size} sites exceeds budget {budget}")
        if reserve == budget or min_quota == cap:
            q = np.full(alphas.size, min_quota, dtype=np.int64)
            return QuotaAllocation(tuple(q.tolist()), int(budget), int(cap), leftover=int(budget - reserve))
        rest = allocate_quotas(alphas, budget - reserve, cap - min_quota, tol=tol)
        q = np.asarray(rest.quotas) + min_quota
        return QuotaAllocation(tuple(q.tolist()), int(budget), int(cap), leftover=rest.leftover)

    # phase 1: floors, capped
    q = np.minimum(np.floor(alphas * budget).astype(np.int64), cap)
    remaining = int(budget - q.sum())

    # phase 2: residual in descending share order, lower index first on ties
    open_sites = [j for j in range(alphas.size) if q[j] < cap]
    open_sites.sort(key=lambda j: (-alphas[j], j))
    for j in open_sites:
        if remaining == 0:
            break
        delta = min(cap - int(q[j]), remaining)
        q[j] += delta
        remaining -= delta

    return QuotaAllocation(tuple(q.tolist()), int(budget), int(cap), leftover=max(remaining, 0))


def initial_uniform_allocation(n_sites, k, cap=None):
    if n_sites < 1 or k < 1:
        raise ValueError("need at least one site and k >= 1")
    cap = k if cap is None else cap
    if k > cap:
        raise ValueError(f"k={k} exceeds per-site cap {cap}")
    return QuotaAllocation((k,) * n_sites, k * n_sites, cap)
