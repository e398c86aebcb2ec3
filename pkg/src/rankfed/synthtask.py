"""Synthetic stand-in for skill-composition fine-tuning.

A small frozen layered model, "skills" planted as ground-truth low-rank
updates (published as noisy LoRA modules), and composite regression tasks
whose labels come from the base model with a weighted sum of skills applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .lora import LoraModule, SiteId
from .network import BaseModel, forward
from .numcore import derive_stream

# stream ids kept apart from the (round, device) streams used in training
_BASE_STREAM = 1 << 40
_SKILL_STREAM = 2 << 40
_TASK_STREAM = 3 << 40
_PART_STREAM = 4 << 40


def make_base(n_layers, width, seed) -> BaseModel:
    if n_layers < 1 or width < 2:
        raise ValueError("need n_layers >= 1 and width >= 2")
    rng = derive_stream(seed, _BASE_STREAM, 0).generator()
    sites = [SiteId(l, k) for l in range(n_layers) for k in ("Q", "V")]
    weights = {s: rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, width)) for s in sites}
    for w in weights.values():
        w.flags.writeable = False
    return BaseModel(n_layers, width, weights)


@dataclass(frozen=True)
class PlantedSkill:
    name: str
    true_factors: Dict[SiteId, tuple] = field(repr=False)
    module: LoraModule = field(repr=False)

    def delta(self, site):
        """Ground-truth scaled update at ``site``."""
        a, b = self.true_factors[site]
        return self.module.scale * (b @ a)


def plant_skill(
    base: BaseModel,
    rank,
    seed,
    factor_noise=0.0,
    *,
    name=None,
    alpha=None,
    strength=1.0,
    decay=1.0,
    site_gains: Optional[Dict[SiteId, float]] = None,
) -> PlantedSkill:
    """Random rank-``rank`` update at every site, published with factor noise.

    ``strength`` sets the typical spectral size of each site's update relative
    to the base weights, ``decay`` geometrically shrinks successive rank
    components (1.0 = equal energy), and ``site_gains`` multiplies the update at
    chosen sites.
    """
    d = base.width
    if not 1 <= rank <= d:
        raise ValueError(f"rank {rank} outside [1, {d}]")
    alpha = float(rank if alpha is None else alpha)
    scale = alpha / rank
    site_gains = site_gains or {}
    rng = derive_stream(seed, _SKILL_STREAM, 0).generator()
    gains = decay ** np.arange(rank)
    # B A x with A, B ~ N(0, 1/d) entries has per-component size ~ 1/sqrt(d)
    gains = gains * strength / (scale * np.sqrt(np.sum(gains**2) / d))
    true, published = {}, {}
    for site in base.sites:
        a = rng.normal(0.0, 1.0 / np.sqrt(d), size=(rank, d))
        b = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, rank))
        g = np.sqrt(gains * site_gains.get(site, 1.0))
        a = a * g[:, None]
        b = b * g[None, :]
        true[site] = (a, b)
        noise_a = rng.normal(0.0, factor_noise, size=a.shape) if factor_noise else 0.0
        noise_b = rng.normal(0.0, factor_noise, size=b.shape) if factor_noise else 0.0
        published[site] = (a + noise_a, b + noise_b)
    name = name or f"skill{seed}"
    return PlantedSkill(name, true, LoraModule(name, rank, alpha, published))


@dataclass(frozen=True)
class CompositeTask:
    skills: List[str]
    lambdas: List[float]
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    @property
    def n_train(self):
        return self.x_train.shape[0]


def composed_weights(base: BaseModel, skills: Sequence[PlantedSkill], lambdas) -> BaseModel:
    weights = {}
    for site in base.sites:
        w = base.weights[site].copy()
        for lam, sk in zip(lambdas, skills):
            w = w + lam * sk.delta(site)
        weights[site] = w
    return BaseModel(base.n_layers, base.width, weights)


def make_composite(base, skills, lambdas, n_train, n_eval, sigma_obs, seed, input_mean=0.0) -> CompositeTask:
    """Labels from the base model with ``sum lambda_n * dW*_n`` added at each site.

    Inputs are i.i.d. ``N(input_mean, 1)`` per coordinate.
    """
    skills = list(skills)
    lambdas = [float(v) for v in lambdas]
    if len(skills) != len(lambdas):
        raise ValueError(f"{len(skills)} skills but {len(lambdas)} weights")
    rng = derive_stream(seed, _TASK_STREAM, 0).generator()
    n = n_train + n_eval
    x = rng.normal(input_mean, 1.0, size=(n, base.width))
    target = composed_weights(base, skills, lambdas)
    y, _ = forward(target, {}, x)
    if sigma_obs:
        y = y + rng.normal(0.0, sigma_obs, size=y.shape)
    return CompositeTask(
        [s.name for s in skills], lambdas, x[:n_train], y[:n_train], x[n_train:], y[n_train:]
    )


def partition(task_or_n, device_count, seed) -> List[np.ndarray]:
    """Shuffle training indices and deal them into near-equal disjoint shards.

    The first ``n % device_count`` shards get one extra sample.
    """
    n = task_or_n if isinstance(task_or_n, int) else task_or_n.n_train
    if device_count < 1:
        raise ValueError("need at least one device")
    if n < device_count:
        raise ValueError(f"{n} samples cannot fill {device_count} shards")
    perm = derive_stream(seed, _PART_STREAM, 0).generator().permutation(n)
    return [np.sort(s) for s in np.array_split(perm, device_count)]


def export_jsonl(path, x, y):
    with open(path, "w") as fh:
        for xi, yi in zip(x, y):
            fh.write(json.dumps({"x": xi.tolist(), "y": yi.tolist()}) + "\n")


def import_jsonl(path):
    xs, ys = [], []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            xs.append(rec["x"])
            ys.append(rec["y"])
    return np.array(xs, dtype=float), np.array(ys, dtype=float)


@dataclass(frozen=True)
class TaskSpec:
    """Everything that defines a composite task; ``build(seed)`` is deterministic.

    The defaults give a rank spectrum that decays fast enough for a few rank
    experts to carry most of each skill, and a nonzero input mean so that
    routers without a bias term can still hold a preferred gate pattern.
    """

    n_layers: int = 2
    width: int = 16
    skill_rank: int = 8
    n_skills: int = 2
    skill_alpha: Optional[float] = None
    strength: float = 0.5
    decay: float = 0.3
    factor_noise: float = 0.0
    sigma_obs: float = 0.0
    input_mean: float = 0.5
    lambdas: Tuple[float, ...] = (0.3, 0.3)
    n_train: int = 2000
    n_eval: int = 500
    skew_site: Optional[str] = None
    skew_gain: float = 4.0

    def __post_init__(self):
        if len(self.lambdas) != self.n_skills:
            raise ValueError(f"{self.n_skills} skills but {len(self.lambdas)} lambdas")
        if not 1 <= self.skill_rank <= self.width:
            raise ValueError(f"skill_rank {self.skill_rank} outside [1, {self.width}]")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("n_train and n_eval must be >= 1")
        if self.factor_noise < 0 or self.sigma_obs < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def gains(self):
        if not self.skew_site:
            return None
        site = SiteId.parse(self.skew_site)
        if site.layer >= self.n_layers:
            raise ValueError(f"skew_site {self.skew_site} not in a {self.n_layers}-layer model")
        return {site: self.skew_gain}

    def build(self, seed) -> Tuple[BaseModel, List[PlantedSkill], CompositeTask]:
        # sub-seeds spaced so neighbouring run seeds never share a stream
        base = make_base(self.n_layers, self.width, seed * 100 + 1)
        skills = [
            plant_skill(base, self.skill_rank, seed * 100 + 2 + i, self.factor_noise, name=f"skill{i}",
                        alpha=self.skill_alpha, strength=self.strength, decay=self.decay,
                        site_gains=self.gains())
            for i in range(self.n_skills)
        ]
        task = make_composite(base, skills, self.lambdas, self.n_train, self.n_eval, self.sigma_obs,
                              seed * 100 + 9, input_mean=self.input_mean)
        return base, skills, task
