"""Federated fine-tuning simulation over reused LoRA knowledge.

Protocol per run (method ``smartfed``):

1. the server pools rank-wise experts from the supplied modules at every site
   and zero-initializes one router per site;
2. every device scores every expert on its local site inputs and the server
   takes the sample-weighted mean;
3. each site starts with the same quota ``K`` of active experts;
4. each round a few devices are sampled, train the routers locally and
   report per-site cumulative importance of their active experts;
5. the server FedAvg-aggregates routers and scores, softmax-normalizes the
   scores and reallocates quotas under the budget ``K * J``;
6. repeat from 4.

``mole`` routes over whole modules instead, ``linear_merge`` evaluates the
averaged module without training, and ``scratch_lora`` trains fresh LoRA
factors with the same gradient machinery and FedAvg.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .eeqa import QuotaAllocation, allocate_quotas, initial_uniform_allocation, normalize_scores
from .experts import build_pool, importance_scores_batch
from .lora import LoraModule, SiteId, merge_linear
from .network import (
    BaseModel,
    LoraAdapter,
    MixtureAdapter,
    MixtureSite,
    forward,
    loss_and_grads,
    mean_gates,
    mse,
    site_inputs,
)
from .numcore import derive_stream

log = logging.getLogger(__name__)

METHODS = ("smartfed", "mole", "linear_merge", "scratch_lora")
FLOAT_BYTES = 8
SERVER_STREAM = -1
INIT_STREAM = -2


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 20
    n_devices: int = 20
    sample_fraction: float = 0.1
    local_steps: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    k: int = 32
    seed: int = 0
    method: str = "smartfed"
    recompute_importance: bool = False
    eeqa: bool = True
    min_quota: int = 0
    merge_lambdas: Optional[tuple] = None
    scratch_rank: Optional[int] = None
    scratch_init_std: float = 0.02
    early_stop: bool = False
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        for name in ("n_devices", "local_steps", "batch_size", "k", "workers", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.min_quota < 0:
            raise ValueError("min_quota must be >= 0")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be finite and >= 0")


@dataclass
class RoundMetrics:
    round: int
    train_loss: Optional[float]
    eval_loss: float
    quotas: List[int]
    uplink_bytes: int
    downlink_bytes: int
    sampled: List[int]
    wall_seconds: float = 0.0

    def to_record(self):
        # wall-clock time is left out so metrics files stay reproducible
        return {
            "round": self.round,
            "train_loss": self.train_loss,
            "eval_loss": self.eval_loss,
            "quotas": list(self.quotas),
            "uplink_bytes": self.uplink_bytes,
            "downlink_bytes": self.downlink_bytes,
            "sampled": list(self.sampled),
        }


@dataclass
class DeviceState:
    device_id: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) == 0:
            raise ValueError(f"device {self.device_id} has an empty shard")

    @property
    def n_samples(self):
        return len(self.x)


@dataclass
class ServerState:
    config: TrainConfig
    base: BaseModel
    modules: List[LoraModule]
    adapters: Dict[SiteId, object]
    pools: Dict[SiteId, object] = field(default_factory=dict)
    quotas: Optional[QuotaAllocation] = None
    importance: Dict[SiteId, np.ndarray] = field(default_factory=dict)
    round: int = 0
    metrics: List[RoundMetrics] = field(default_factory=list)

    @property
    def sites(self):
        return self.base.sites

    @property
    def n_experts(self):
        return {s: ad.site.n_experts for s, ad in self.adapters.items() if isinstance(ad, MixtureAdapter)}

    def router_weights(self):
        return {s: ad.router for s, ad in self.adapters.items() if isinstance(ad, MixtureAdapter)}

    def set_quotas(self, alloc: QuotaAllocation):
        self.quotas = alloc
        self.adapters = {
            s: self.adapters[s].with_params(self.adapters[s].params(), quota=q) for s, q in zip(self.sites, alloc)
        }


def _check_modules(modules, base):
    if not modules:
        raise ValueError("need at least one LoRA module")
    if not base.sites:
        raise ValueError("base model has no adapted sites")
    for m in modules:
        for s in base.sites:
            if s not in m.factors:
                raise ValueError(f"module {m.name} lacks site {s}")
            if m.dim(s) != base.width:
                raise ValueError(f"module {m.name} width {m.dim(s)} != base width {base.width}")


def server_init(config: TrainConfig, modules: Sequence[LoraModule], base: BaseModel) -> ServerState:
    modules = list(modules)
    if config.method != "scratch_lora":
        _check_modules(modules, base)
    elif not base.sites:
        raise ValueError("base model has no adapted sites")
    d = base.width
    adapters, pools = {}, {}
    quotas = None
    if config.method == "smartfed":
        for s in base.sites:
            pools[s] = build_pool(modules, s)
        m = pools[base.sites[0]].size
        k = min(config.k, m)
        if k < config.k:
            log.warning("K=%d exceeds the %d experts per site; using K=%d", config.k, m, k)
        quotas = initial_uniform_allocation(len(base.sites), k, cap=m)
        for s, q in zip(base.sites, quotas):
            adapters[s] = MixtureAdapter(MixtureSite.from_pool(pools[s]), np.zeros((pools[s].size, d)), q)
    elif config.method == "mole":
        n = len(modules)
        for s in base.sites:
            adapters[s] = MixtureAdapter(MixtureSite.from_modules(modules, s), np.zeros((n, d)), n)
    elif config.method == "linear_merge":
        lambdas = config.merge_lambdas or [1.0 / len(modules)] * len(modules)
        merged = merge_linear(modules, lambdas)
        for s in base.sites:
            adapters[s] = LoraAdapter.from_module(merged, s)
    else:
        r = config.scratch_rank or (modules[0].rank if modules else 8)
        alpha = modules[0].alpha if modules else float(r)
        rng = derive_stream(config.seed, INIT_STREAM, 0).generator()
        for s in base.sites:
            a = rng.normal(0.0, config.scratch_init_std, size=(r, d))
            adapters[s] = LoraAdapter(a, np.zeros((d, r)), alpha / r)
    return ServerState(config, base, modules, adapters, pools, quotas)


def importance_pass(server: ServerState, devices: Sequence[DeviceState]) -> Dict[SiteId, np.ndarray]:
    """Per-expert importance, averaged on each device then sample-weighted across devices."""
    if not server.pools:
        return {}
    total = sum(dev.n_samples for dev in devices)
    agg = {s: np.zeros(p.size) for s, p in server.pools.items()}
    for dev in devices:
        if dev.n_samples == 0:
            raise ValueError(f"device {dev.device_id} has an empty shard")
        inputs = site_inputs(server.base, dev.x)
        for s, pool in server.pools.items():
            agg[s] += (dev.n_samples / total) * importance_scores_batch(pool, inputs[s])
    return agg


def sample_devices(server_or_config, round_index, fraction=None, n_devices=None):
    cfg = server_or_config.config if isinstance(server_or_config, ServerState) else server_or_config
    fraction = cfg.sample_fraction if fraction is None else fraction
    n = cfg.n_devices if n_devices is None else n_devices
    count = max(1, min(n, math.ceil(fraction * n - 1e-9)))
    rng = derive_stream(cfg.seed, round_index, SERVER_STREAM).generator()
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def clone_adapters(adapters):
    return {s: ad.with_params({k: v.copy() for k, v in ad.params().items()}) for s, ad in adapters.items()}


def site_scores(adapters, importance, x, base) -> np.ndarray:
    """Cumulative importance of active experts per site, gates averaged over ``x``."""
    _, tape = forward(base, adapters, x, keep=True)
    gates = mean_gates(adapters, tape)
    return np.array([float(gates[s] @ importance[s]) for s in base.sites])


@dataclass
class LocalResult:
    device_id: int
    n_samples: int
    params: Dict[SiteId, Dict[str, np.ndarray]]
    s_sum: Optional[np.ndarray]
    mean_loss: float


def local_train(
    device: DeviceState,
    adapters,
    base: BaseModel,
    steps,
    lr,
    batch_size,
    rng: np.random.Generator,
    importance: Optional[Dict[SiteId, np.ndarray]] = None,
) -> LocalResult:
    """Mini-batch SGD on the adapters' trainable parameters only.

    Batches walk a per-device shuffled order and wrap around the shard, so a
    batch larger than the shard repeats samples. ``adapters`` is cloned first.
    """
    adapters = clone_adapters(adapters)
    order = rng.permutation(device.n_samples)
    cursor = 0
    losses = []
    for _ in range(steps):
        idx = order[(cursor + np.arange(batch_size)) % device.n_samples]
        cursor = (cursor + batch_size) % device.n_samples
        loss, grads = loss_and_grads(base, adapters, device.x[idx], device.y[idx])
        losses.append(loss)
        if lr:
            adapters = {
                s: ad.with_params({k: v - lr * grads[s][k] for k, v in ad.params().items()})
                for s, ad in adapters.items()
            }
    s_sum = site_scores(adapters, importance, device.x, base) if importance else None
    params = {s: ad.params() for s, ad in adapters.items()}
    return LocalResult(device.device_id, device.n_samples, params, s_sum, float(np.mean(losses)))


def local_train_router(device, adapters, base, steps, lr, batch_size, rng, importance):
    res = local_train(device, adapters, base, steps, lr, batch_size, rng, importance)
    return res.params, res.s_sum


def router_gradient(batch_x, batch_y, adapters, base):
    """Per-site gradient of the batch MSE w.r.t. every trainable adapter parameter."""
    return loss_and_grads(base, adapters, batch_x, batch_y)[1]


def fedavg_aggregate(updates):
    """Sample-count weighted mean of per-site parameter dicts (or plain arrays)."""
    updates = list(updates)
    if not updates:
        raise ValueError("nothing to aggregate")
    total = float(sum(n for _, n in updates))

    def combine(items):
        first = items[0][0]
        if isinstance(first, dict):
            if any(set(p) != set(first) for p, _ in items):
                raise ValueError("updates disagree on keys")
            return {k: combine([(p[k], n) for p, n in items]) for k in sorted(first, key=str)}
        shape = np.shape(first)
        if any(np.shape(p) != shape for p, _ in items):
            raise ValueError("updates disagree on shapes")
        if len(items) == 1:
            return np.array(first, dtype=float, copy=True)
        out = np.zeros(shape)
        for p, n in items:
            out = out + (n / total) * np.asarray(p, dtype=float)
        return out

    return combine(updates)


def evaluate(server: ServerState, x, y):
    pred, _ = forward(server.base, server.adapters, x)
    return mse(pred, y)


def uplink_bytes_per_device(server: ServerState):
    method = server.config.method
    if method == "smartfed":
        routers = sum(ad.router.size for ad in server.adapters.values())
        return (routers + len(server.sites)) * FLOAT_BYTES
    if method in ("mole", "scratch_lora"):
        return sum(v.size for ad in server.adapters.values() for v in ad.params().values()) * FLOAT_BYTES
    return 0


def downlink_bytes_per_device(server: ServerState):
    method = server.config.method
    if method == "smartfed":
        # routers plus the current quota vector
        routers = sum(ad.router.size for ad in server.adapters.values())
        return (routers + len(server.sites)) * FLOAT_BYTES
    return uplink_bytes_per_device(server)


def make_devices(task, shards):
    return [DeviceState(i, task.x_train[idx], task.y_train[idx]) for i, idx in enumerate(shards)]


def run(
    config: TrainConfig,
    modules: Sequence[LoraModule],
    base: BaseModel,
    task,
    shards=None,
    callback: Optional[Callable[[ServerState], None]] = None,
) -> List[RoundMetrics]:
    """Execute a full simulated run and return per-round metrics (round 0 = untrained)."""
    from .synthtask import partition

    t0 = time.perf_counter()
    server = server_init(config, modules, base)
    if shards is None:
        shards = partition(task, config.n_devices, config.seed)
    if len(shards) != config.n_devices:
        raise ValueError(f"{len(shards)} shards for {config.n_devices} devices")
    devices = make_devices(task, shards)

    round0_up = 0
    if config.method == "smartfed":
        server.importance = importance_pass(server, devices)
        per_dev = sum(v.size for v in server.importance.values()) * FLOAT_BYTES
        round0_up = per_dev * len(devices)
    quotas = list(server.quotas) if server.quotas else []
    server.metrics.append(
        RoundMetrics(0, None, evaluate(server, task.x_eval, task.y_eval), quotas, round0_up, 0, [],
                     time.perf_counter() - t0)
    )
    if callback:
        callback(server)
    if config.method == "linear_merge":
        return server.metrics

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for rnd in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            server.round = rnd
            up = 0
            if config.method == "smartfed" and config.recompute_importance:
                server.importance = importance_pass(server, devices)
                up += sum(v.size for v in server.importance.values()) * FLOAT_BYTES * len(devices)
            chosen = sample_devices(server, rnd)
            importance = server.importance if config.method == "smartfed" else None
            snapshot = server.adapters

            def work(dev_id):
                rng = derive_stream(config.seed, rnd, dev_id).generator()
                return local_train(devices[dev_id], snapshot, base, config.local_steps, config.lr,
                                   config.batch_size, rng, importance)

            results = list(pool.map(work, chosen)) if pool else [work(i) for i in chosen]
            up += uplink_bytes_per_device(server) * len(results)
            down = downlink_bytes_per_device(server) * len(results)

            merged = fedavg_aggregate([(r.params, r.n_samples) for r in results])
            server.adapters = {s: ad.with_params(merged[s]) for s, ad in server.adapters.items()}
            if config.method == "smartfed" and config.eeqa:
                s_sum = fedavg_aggregate([(r.s_sum, r.n_samples) for r in results])
                m = next(iter(server.n_experts.values()))
                alloc = allocate_quotas(normalize_scores(s_sum), server.quotas.budget, m,
                                        min_quota=config.min_quota)
                # new quotas take effect from the next forward pass
                server.set_quotas(alloc)
            train_loss = float(np.average([r.mean_loss for r in results], weights=[r.n_samples for r in results]))
            quotas = list(server.quotas) if server.quotas else []
            server.metrics.append(
                RoundMetrics(rnd, train_loss, evaluate(server, task.x_eval, task.y_eval), quotas, up, down,
                             list(chosen), time.perf_counter() - t0)
            )
            log.info("round %d: eval %.6g train %.6g quotas %s", rnd, server.metrics[-1].eval_loss, train_loss, quotas)
            if callback:
                callback(server)
            if config.early_stop and _stalled(server.metrics, config):
                log.info("early stop after round %d", rnd)
                break
    finally:
        if pool:
            pool.shutdown()
    return server.metrics


def _stalled(metrics, config):
    p = config.early_stop_patience
    if len(metrics) <= p:
        return False
    best_before = min(m.eval_loss for m in metrics[:-p])
    return best_before - min(m.eval_loss for m in metrics[-p:]) < config.early_stop_tol
