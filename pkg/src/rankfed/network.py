"""Batched layered model with pluggable per-site adapters and manual backprop.

Each layer applies its Q site then its V site; ``tanh`` sits between layers
(not after the last). A site computes ``W0 x`` plus whatever its adapter adds.
Adapters:

* :class:`MixtureAdapter` -- router-gated sum of low-rank experts. With
  rank-one experts this is the rank-wise mixture; with whole modules as
  experts it is the module-level mixture.
* :class:`LoraAdapter` -- a plain ``scale * B A`` update (merged or trained).

Gradients are exact for everything upstream of the top-K mask; the mask is
held fixed during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .experts import ExpertPool
from .lora import Kind, LoraModule, SiteId
from .numcore import DimensionError, softmax_rows, top_k_mask_rows


@dataclass(frozen=True)
class MixtureSite:
    """Frozen expert factors for one site, flattened to rank-one columns.

    ``owner[c]`` is the expert that column ``c`` belongs to.
    """

    a: np.ndarray        # (R, d) rows of A
    b: np.ndarray        # (R, d) columns of B, stored as rows
    scale: np.ndarray    # (R,)
    owner: np.ndarray    # (R,) int
    n_experts: int

    @classmethod
    def from_pool(cls, pool: ExpertPool):
        b, a, s = pool.stacked()
        return cls(a, b, s, np.arange(pool.size), pool.size)

    @classmethod
    def from_modules(cls, modules: Sequence[LoraModule], site: SiteId):
        a_rows, b_rows, scales, owner = [], [], [], []
        for n, m in enumerate(modules):
            a, b = m.ab(site)
            a_rows.append(a)
            b_rows.append(b.T)
            scales.extend([m.scale] * m.rank)
            owner.extend([n] * m.rank)
        return cls(np.vstack(a_rows), np.vstack(b_rows), np.array(scales), np.array(owner), len(modules))

    @property
    def dim(self):
        return self.a.shape[1]

    def owner_matrix(self):
        onehot = np.zeros((self.owner.size, self.n_experts))
        onehot[np.arange(self.owner.size), self.owner] = 1.0
        return onehot


class MixtureAdapter:
    trainable = ("router",)

    def __init__(self, site: MixtureSite, router: np.ndarray, quota: int):
        if router.shape != (site.n_experts, site.dim):
            raise DimensionError(f"router shape {router.shape} vs ({site.n_experts}, {site.dim})")
        self.site = site
        self.router = router
        self.quota = int(quota)
        self._onehot = site.owner_matrix()

    def gates(self, x):
        g = softmax_rows(x @ self.router.T)
        mask = top_k_mask_rows(g, self.quota)
        return g, mask, g * mask

    def forward(self, w0, x):
        s = self.site
        g, mask, gt = self.gates(x)
        p = x @ s.a.T                          # (n, R)
        coeff = (gt @ self._onehot.T) * s.scale
        out = x @ w0.T + (coeff * p) @ s.b
        return out, (x, g, mask, gt, p, coeff)

    def backward(self, w0, cache, d_out):
        x, g, mask, gt, p, coeff = cache
        s = self.site
        q = d_out @ s.b.T                      # (n, R): b_c . delta
        d_x = d_out @ w0 + (coeff * q) @ s.a
        d_gt = (q * p * s.scale) @ self._onehot
        d_g = d_gt * mask
        d_logits = g * (d_g - np.sum(d_g * g, axis=1, keepdims=True))
        d_x = d_x + d_logits @ self.router
        return d_x, {"router": d_logits.T @ x}

    def params(self):
        return {"router": self.router}

    def with_params(self, params, quota=None):
        return MixtureAdapter(self.site, params["router"], self.quota if quota is None else quota)


class LoraAdapter:
    trainable = ("A", "B")

    def __init__(self, a: np.ndarray, b: np.ndarray, scale: float):
        self.a = a
        self.b = b
        self.scale = float(scale)

    @classmethod
    def from_module(cls, module: LoraModule, site: SiteId):
        a, b = module.ab(site)
        return cls(a, b, module.scale)

    def forward(self, w0, x):
        p = x @ self.a.T
        return x @ w0.T + self.scale * (p @ self.b.T), (x, p)

    def backward(self, w0, cache, d_out):
        x, p = cache
        db = d_out @ self.b                    # (n, r)
        d_x = d_out @ w0 + self.scale * (db @ self.a)
        return d_x, {"A": self.scale * db.T @ x, "B": self.scale * d_out.T @ p}

    def params(self):
        return {"A": self.a, "B": self.b}

    def with_params(self, params, quota=None):
        return LoraAdapter(params["A"], params["B"], self.scale)


@dataclass(frozen=True)
class BaseModel:
    n_layers: int
    width: int
    weights: Dict[SiteId, np.ndarray]

    @property
    def sites(self):
        return [SiteId(l, k) for l in range(self.n_layers) for k in (Kind.Q, Kind.V)]

    @property
    def n_sites(self):
        return 2 * self.n_layers


def forward(base: BaseModel, adapters: Dict[SiteId, object], x, keep=False):
    """Run the layered model on a batch ``x`` (n x d).

    Returns ``(output, tape)``; the tape holds per-site inputs and adapter
    caches when ``keep`` is true.
    """
    h = np.atleast_2d(np.asarray(x, dtype=float))
    tape = {"site_inputs": {}, "caches": {}, "pre_tanh": []}
    for layer in range(base.n_layers):
        for kind in (Kind.Q, Kind.V):
            site = SiteId(layer, kind)
            w0 = base.weights[site]
            if keep:
                tape["site_inputs"][site] = h
            ad = adapters.get(site)
            if ad is None:
                h = h @ w0.T
            else:
                h, cache = ad.forward(w0, h)
                if keep:
                    tape["caches"][site] = cache
        if layer < base.n_layers - 1:
            if keep:
                tape["pre_tanh"].append(h)
            h = np.tanh(h)
    return h, tape


def mse(pred, y):
    return float(np.mean((pred - y) ** 2))


def loss_and_grads(base: BaseModel, adapters, x, y):
    """MSE loss and per-site gradients of every adapter's trainable params."""
    pred, tape = forward(base, adapters, x, keep=True)
    y = np.atleast_2d(y)
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite activations in forward pass")
    loss = mse(pred, y)
    delta = 2.0 * (pred - y) / pred.size
    grads = {}
    for layer in reversed(range(base.n_layers)):
        if layer < base.n_layers - 1:
            delta = delta * (1.0 - np.tanh(tape["pre_tanh"][layer]) ** 2)
        for kind in (Kind.V, Kind.Q):
            site = SiteId(layer, kind)
            w0 = base.weights[site]
            ad = adapters.get(site)
            if ad is None:
                delta = delta @ w0
            else:
                delta, g = ad.backward(w0, tape["caches"][site], delta)
                grads[site] = g
    return loss, grads


def mean_gates(adapters, tape) -> Dict[SiteId, np.ndarray]:
    """Average masked gate vector per mixture site over a kept forward tape."""
    out = {}
    for site, cache in tape["caches"].items():
        if isinstance(adapters.get(site), MixtureAdapter):
            out[site] = cache[3].mean(axis=0)
    return out


def site_inputs(base: BaseModel, x) -> Dict[SiteId, np.ndarray]:
    """Inputs reaching each site during a base-only forward pass."""
    _, tape = forward(base, {}, x, keep=True)
    return tape["site_inputs"]


def param_count(adapters, site: Optional[SiteId] = None):
    items = [adapters[site]] if site is not None else list(adapters.values())
    return sum(int(np.size(v)) for ad in items for v in ad.params().values())
