"""Rank-wise experts: decomposition, pooling, sparse routing and importance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .lora import LoraModule, SiteId
from .numcore import (
    DEGENERATE_NORM,
    DimensionError,
    as_matrix,
    as_vector,
    softmax,
    top_k_indices,
)


@dataclass(frozen=True)
class RankExpert:
    """Column ``i`` of B paired with row ``i`` of A, carrying the module's alpha / r."""

    b_col: np.ndarray
    a_row: np.ndarray
    source_module: str
    source_rank_index: int
    scale: float

    def __post_init__(self):
        if self.b_col.shape != self.a_row.shape or self.b_col.ndim != 1:
            raise DimensionError("b_col and a_row must be vectors of equal length")
        if not self.scale > 0:
            raise ValueError("expert scale must be positive")

    def __call__(self, x):
        return self.scale * self.b_col * (self.a_row @ x)

    def matrix(self):
        return self.scale * np.outer(self.b_col, self.a_row)


@dataclass(frozen=True)
class ExpertPool:
    site: SiteId
    experts: tuple

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        if not self.experts:
            raise ValueError("empty expert pool")
        d = self.experts[0].b_col.shape[0]
        if any(e.b_col.shape[0] != d for e in self.experts):
            raise DimensionError("experts disagree on width")

    @property
    def size(self):
        return len(self.experts)

    @property
    def dim(self):
        return self.experts[0].b_col.shape[0]

    def stacked(self):
        """``(B_rows, A_rows, scales)`` with one row per expert."""
        b = np.stack([e.b_col for e in self.experts])
        a = np.stack([e.a_row for e in self.experts])
        s = np.array([e.scale for e in self.experts])
        return b, a, s

    def boundaries(self):
        """Start index of each source module's block, in pool order."""
        starts, seen = [], None
        for i, e in enumerate(self.experts):
            if e.source_module != seen:
                starts.append(i)
                seen = e.source_module
        return starts

    def manifest(self):
        return {
            "site": self.site.label,
            "size": self.size,
            "modules": [self.experts[i].source_module for i in self.boundaries()],
            "boundaries": self.boundaries(),
            "experts": [[e.source_module, e.source_rank_index] for e in self.experts],
        }

    def manifest_json(self):
        return json.dumps(self.manifest(), sort_keys=True)


class SiteRouter:
    """Per-site router: an ``M x d`` weight matrix and an activation quota."""

    def __init__(self, weights, quota):
        self.weights = as_matrix(weights, "router weights").copy()
        self.quota = int(quota)
        if not 0 <= self.quota <= self.weights.shape[0]:
            raise ValueError(f"quota {quota} outside [0, {self.weights.shape[0]}]")

    @classmethod
    def zeros(cls, n_experts, d, quota):
        return cls(np.zeros((n_experts, d)), quota)

    @property
    def n_experts(self):
        return self.weights.shape[0]

    def copy(self):
        return SiteRouter(self.weights, self.quota)

    def __repr__(self):
        return f"SiteRouter(M={self.n_experts}, d={self.weights.shape[1]}, K={self.quota})"


@dataclass(frozen=True)
class GateState:
    logits: np.ndarray
    g: np.ndarray
    mask: np.ndarray
    g_tilde: np.ndarray

    @property
    def active(self):
        return np.flatnonzero(self.mask)


def decompose(module: LoraModule, site: SiteId) -> List[RankExpert]:
    a, b = module.ab(site)
    return [
        RankExpert(b[:, i].copy(), a[i, :].copy(), module.name, i, module.scale)
        for i in range(module.rank)
    ]


def build_pool(modules: Sequence[LoraModule], site: SiteId) -> ExpertPool:
    if not modules:
        raise ValueError("need at least one LoRA module")
    d = modules[0].dim(site)
    experts = []
    for m in modules:
        if m.dim(site) != d:
            raise DimensionError(f"module {m.name} has width {m.dim(site)}, expected {d}")
        experts.extend(decompose(m, site))
    return ExpertPool(site, experts)


def route(router: SiteRouter, x) -> GateState:
    """Softmax gate with a top-K mask; masked weights are not renormalized."""
    x = as_vector(x, "x")
    if router.weights.shape[1] != x.shape[0]:
        raise DimensionError(f"router expects width {router.weights.shape[1]}, got {x.shape[0]}")
    logits = router.weights @ x
    g = softmax(logits)
    mask = np.zeros_like(g)
    if router.quota > 0:
        mask[top_k_indices(g, router.quota)] = 1.0
    return GateState(logits, g, mask, g * mask)


def more_forward(pool: ExpertPool, router: SiteRouter, w0, x, gate_override: Optional[np.ndarray] = None):
    """Base transform plus the gated sum of active rank-wise experts.

    ``gate_override`` replaces ``g_tilde`` (test hook for equivalence checks);
    the returned :class:`GateState` is still the router's own.
    """
    if router.n_experts != pool.size:
        raise DimensionError(f"router has {router.n_experts} experts, pool has {pool.size}")
    w0 = as_matrix(w0, "w0")
    x = as_vector(x, "x")
    if w0.shape != (pool.dim, pool.dim):
        raise DimensionError("w0 does not match pool width")
    state = route(router, x)
    weights = state.g_tilde if gate_override is None else as_vector(gate_override, "gate_override")
    out = w0 @ x
    for m in np.flatnonzero(weights):
        out = out + weights[m] * pool.experts[m](x)
    return out, state


def importance_score(expert: RankExpert, h) -> float:
    """``1 - cos(h, E(h))``; an expert with (near) zero output scores 0."""
    h = as_vector(h, "h")
    h_e = expert(h)
    nh = np.linalg.norm(h)
    ne = np.linalg.norm(h_e)
    if nh < DEGENERATE_NORM or ne < DEGENERATE_NORM:
        return 0.0
    return 1.0 - float(np.clip(h @ h_e / (nh * ne), -1.0, 1.0))


def importance_scores_batch(pool: ExpertPool, hs) -> np.ndarray:
    """Mean importance score per expert over the rows of ``hs`` (n x d)."""
    hs = np.atleast_2d(np.asarray(hs, dtype=float))
    b, a, s = pool.stacked()
    proj = hs @ a.T                      # (n, M): a_m . h
    nh = np.linalg.norm(hs, axis=1)      # (n,)
    nb = np.linalg.norm(b, axis=1)       # (M,)
    # E_m(h) = s_m * proj * b_m, so h.E_m(h) = s_m * proj * (h.b_m)
    dots = s * proj * (hs @ b.T)
    ne = np.abs(s * proj) * nb
    degenerate = (ne < DEGENERATE_NORM) | (nh[:, None] < DEGENERATE_NORM)
    denom = np.where(degenerate, 1.0, ne * nh[:, None])
    scores = np.where(degenerate, 0.0, 1.0 - np.clip(dots / denom, -1.0, 1.0))
    return scores.mean(axis=0)


def cumulative_site_score(gate: GateState, scores) -> float:
    scores = as_vector(scores, "scores")
    if scores.shape != gate.g_tilde.shape:
        raise DimensionError("scores and gate lengths differ")
    return float(gate.g_tilde @ scores)
