"""LoRA modules: forward pass, linear merging, interference terms and MoLE."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .numcore import DimensionError, as_matrix, as_vector


class Kind(str, enum.Enum):
    Q = "Q"
    V = "V"


@dataclass(frozen=True, order=True)
class SiteId:
    layer: int
    kind: Kind

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.layer < 0:
            raise ValueError("layer index must be non-negative")

    @property
    def label(self):
        return f"L{self.layer}.{self.kind.value}"

    @classmethod
    def parse(cls, label):
        try:
            layer, kind = label.split(".")
            return cls(int(layer.lstrip("L")), Kind(kind))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"bad site label {label!r}, expected e.g. 'L0.Q'") from exc

    def __str__(self):
        return self.label


@dataclass(frozen=True)
class LoraModule:
    """Low-rank factors ``(A: r x d, B: d x r)`` per adapted site."""

    name: str
    rank: int
    alpha: float
    factors: Dict[SiteId, Tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        clean = {}
        for site, (a, b) in self.factors.items():
            a = as_matrix(a, f"{self.name}[{site}].A").copy()
            b = as_matrix(b, f"{self.name}[{site}].B").copy()
            d = a.shape[1]
            if a.shape != (self.rank, d) or b.shape != (d, self.rank):
                raise DimensionError(
                    f"{self.name}[{site}]: A {a.shape} / B {b.shape} inconsistent with rank {self.rank}"
                )
            a.flags.writeable = False
            b.flags.writeable = False
            clean[SiteId(site.layer, site.kind)] = (a, b)
        object.__setattr__(self, "factors", clean)

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def sites(self):
        return sorted(self.factors)

    def dim(self, site=None):
        site = site if site is not None else self.sites[0]
        return self.factors[site][0].shape[1]

    def ab(self, site):
        try:
            return self.factors[site]
        except KeyError:
            raise KeyError(f"module {self.name!r} has no site {site}") from None

    def delta(self, site):
        """Dense scaled update ``(alpha / r) * B @ A``."""
        a, b = self.ab(site)
        return self.scale * (b @ a)

    # serialization -------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "rank": self.rank,
            "alpha": self.alpha,
            "sites": [
                {
                    "layer": s.layer,
                    "kind": s.kind.value,
                    "A": self.factors[s][0].tolist(),
                    "B": self.factors[s][1].tolist(),
                }
                for s in self.sites
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        for key in ("name", "rank", "alpha", "sites"):
            if key not in doc:
                raise ValueError(f"LoRA document missing key {key!r}")
        factors = {}
        for entry in doc["sites"]:
            site = SiteId(int(entry["layer"]), Kind(entry["kind"]))
            if site in factors:
                raise ValueError(f"duplicate site {site}")
            factors[site] = (np.array(entry["A"], dtype=float), np.array(entry["B"], dtype=float))
        return cls(str(doc["name"]), int(doc["rank"]), float(doc["alpha"]), factors)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class InterferenceReport:
    task_terms: List[np.ndarray]
    cross_terms: List[np.ndarray]
    merged_output: np.ndarray


def _check_site(module, site, w0, x):
    a, b = module.ab(site)
    w0 = as_matrix(w0, "w0")
    x = as_vector(x, "x")
    d = a.shape[1]
    if w0.shape != (d, d) or x.shape[0] != d:
        raise DimensionError(f"w0 {w0.shape} / x {x.shape} inconsistent with d={d}")
    return a, b, w0, x


def lora_forward(module, site, w0, x):
    """``W0 x + (alpha / r) * B (A x)``."""
    a, b, w0, x = _check_site(module, site, w0, x)
    return w0 @ x + module.scale * (b @ (a @ x))


def _check_mergeable(modules):
    if not modules:
        raise ValueError("need at least one module")
    first = modules[0]
    for m in modules[1:]:
        if m.rank != first.rank:
            raise DimensionError(f"rank mismatch: {first.name}={first.rank}, {m.name}={m.rank}")
        if m.sites != first.sites:
            raise DimensionError(f"site mismatch between {first.name} and {m.name}")
        for s in first.sites:
            if m.factors[s][0].shape != first.factors[s][0].shape:
                raise DimensionError(f"dimension mismatch at {s}")


def merge_linear(modules: Sequence[LoraModule], lambdas, name="merged", alpha=None):
    """Element-wise weighted sum of factors: ``B = sum l_n B_n``, ``A = sum l_n A_n``.

    All modules must share rank, sites and width. The merged module keeps the
    first module's alpha unless ``alpha`` is given.
    """
    modules = list(modules)
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != len(modules):
        raise ValueError(f"{len(modules)} modules but {len(lambdas)} weights")
    _check_mergeable(modules)
    factors = {}
    for s in modules[0].sites:
        a = sum(lam * m.factors[s][0] for lam, m in zip(lambdas, modules))
        b = sum(lam * m.factors[s][1] for lam, m in zip(lambdas, modules))
        factors[s] = (a, b)
    return LoraModule(name, modules[0].rank, modules[0].alpha if alpha is None else alpha, factors)


def interference_decompose(m1, m2, l1, l2, site, x):
    """Split the merged two-module update into task and cross-task terms.

    Terms are unscaled (no alpha / r), matching the bare ``B_add A_add x``
    algebra; multiply by ``m1.scale`` for the scaled variant.
    """
    _check_mergeable([m1, m2])
    x = as_vector(x, "x")
    a1, b1 = m1.ab(site)
    a2, b2 = m2.ab(site)
    if x.shape[0] != a1.shape[1]:
        raise DimensionError("x length does not match module width")
    task = [l1 * l1 * (b1 @ (a1 @ x)), l2 * l2 * (b2 @ (a2 @ x))]
    cross = [l1 * l2 * (b1 @ (a2 @ x)), l1 * l2 * (b2 @ (a1 @ x))]
    merged = (l1 * b1 + l2 * b2) @ ((l1 * a1 + l2 * a2) @ x)
    return InterferenceReport(task, cross, merged)


def mole_forward(modules, gate, site, w0, x):
    """Whole-module mixture: ``W0 x + sum_n gate_n * scale_n * B_n (A_n x)``."""
    gate = as_vector(gate, "gate")
    if gate.shape[0] != len(modules):
        raise DimensionError(f"gate has {gate.shape[0]} entries for {len(modules)} modules")
    if np.any(gate < 0):
        raise ValueError("gate entries must be non-negative")
    w0 = as_matrix(w0, "w0")
    x = as_vector(x, "x")
    out = w0 @ x
    for g, m in zip(gate, modules):
        a, b, _, _ = _check_site(m, site, w0, x)
        out = out + g * m.scale * (b @ (a @ x))
    return out
