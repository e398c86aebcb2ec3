"""Command-line runner: ``rankfed run | compare | inspect``.

Configs are flat TOML files. Any key can be overridden with ``--key value``.
Outputs go to ``<root>/<run_name>``, where the root comes from ``--out``, the
``output_dir`` key, ``$RANKFED_OUTPUT_ROOT`` or ``./runs``, in that order.

Exit codes: 0 ok, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .fedsim import TrainConfig, run
from .lora import SiteId
from .network import MixtureAdapter, forward, mean_gates
from .synthtask import TaskSpec, export_jsonl

log = logging.getLogger("rankfed")

OUTPUT_ROOT_ENV = "RANKFED_OUTPUT_ROOT"
REQUIRED = ("method", "seed")
TASK_KEYS = tuple(f.name for f in dataclasses.fields(TaskSpec))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


class ConfigError(Exception):
    """Bad configuration; ``where`` is a file:line or override label."""

    def __init__(self, message, where=None):
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class ExperimentConfig:
    # training
    method: str = "smartfed"
    seed: int = 0
    rounds: int = 20
    n_devices: int = 20
    sample_fraction: float = 0.1
    local_steps: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    k: int = 32
    recompute_importance: bool = False
    eeqa: bool = True
    min_quota: int = 0
    merge_lambdas: Optional[list] = None
    scratch_rank: Optional[int] = None
    scratch_init_std: float = 0.02
    early_stop: bool = False
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 3
    workers: int = 1
    # task
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
    lambdas: Optional[list] = None
    n_train: int = 2000
    n_eval: int = 500
    skew_site: str = ""
    skew_gain: float = 4.0
    # outputs
    run_name: str = ""
    output_dir: str = ""
    checkpoint_every: int = 1
    export_checkpoints: bool = True
    export_dataset: bool = False

    def train_config(self) -> TrainConfig:
        kw = {k: getattr(self, k) for k in TRAIN_KEYS}
        if kw["merge_lambdas"] is not None:
            kw["merge_lambdas"] = tuple(kw["merge_lambdas"])
        return TrainConfig(**kw)

    def task_spec(self) -> TaskSpec:
        kw = {k: getattr(self, k) for k in TASK_KEYS}
        kw["lambdas"] = tuple(self.lambdas) if self.lambdas is not None else (0.3,) * self.n_skills
        kw["skew_site"] = self.skew_site or None
        return TaskSpec(**kw)

    def name(self):
        return self.run_name or f"{self.method}-seed{self.seed}"

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        # output locations do not change results, so they stay out of the hash
        d = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "run_name", "workers")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def task_hash(self):
        d = dataclasses.asdict(self.task_spec())
        d["seed"] = self.seed
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()


def _expected_type(key):
    default = getattr(_DEFAULTS, key)
    if key in ("merge_lambdas", "lambdas"):
        return list
    if key == "scratch_rank":
        return int
    if key == "skill_alpha":
        return float
    return type(default)


def _coerce(key, value, where):
    want = _expected_type(key)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if want is list and isinstance(value, list):
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of numbers", where)
        return [float(v) for v in value]
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ConfigError(f"{key} must be {want.__name__}, got {type(value).__name__}", where)
    return value


def _key_lines(text):
    lines = {}
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*=", line)
        if m:
            lines.setdefault(m.group(1), no)
    return lines


def _parse_override_value(raw):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def load_config(path=None, overrides: Sequence[tuple] = ()) -> ExperimentConfig:
    """Read a flat TOML config (or a run manifest) and apply ``(key, raw)`` overrides."""
    values: Dict[str, object] = {}
    where: Dict[str, str] = {}
    label = "<config>"
    if path is not None:
        label = str(path)
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", label) from None
        if str(path).endswith(".json"):
            try:
                raw = json.loads(text)["config"]
            except (ValueError, KeyError, TypeError):
                raise ConfigError("not a run manifest", label) from None
            lines = {}
        else:
            try:
                raw = tomllib.loads(text)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(str(e), label) from None
            lines = _key_lines(text)
        for key, value in raw.items():
            loc = f"{label}:{lines[key]}" if key in lines else label
            if isinstance(value, dict):
                raise ConfigError(f"tables are not allowed ([{key}]); keep the file flat", loc)
            values[key] = value
            where[key] = loc
    for key, raw_value in overrides:
        key = key.replace("-", "_")
        values[key] = _parse_override_value(raw_value) if isinstance(raw_value, str) else raw_value
        where[key] = f"--{key}"
    for key in values:
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", where[key])
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", label)
    clean = {}
    for key, value in values.items():
        if value is None:
            clean[key] = None
            continue
        clean[key] = _coerce(key, value, where[key])
    cfg = ExperimentConfig(**clean)
    validate(cfg, where)
    return cfg


def validate(cfg: ExperimentConfig, where=None):
    """Check every bound up front; raise ConfigError naming the offending key."""
    where = where or {}

    def fail(key, msg):
        raise ConfigError(msg, where.get(key))

    if cfg.checkpoint_every < 1:
        fail("checkpoint_every", "checkpoint_every must be >= 1")
    if cfg.lambdas is not None and len(cfg.lambdas) != cfg.n_skills:
        fail("lambdas", f"lambdas has {len(cfg.lambdas)} entries for {cfg.n_skills} skills")
    if cfg.merge_lambdas is not None and len(cfg.merge_lambdas) != cfg.n_skills:
        fail("merge_lambdas", f"merge_lambdas has {len(cfg.merge_lambdas)} entries for {cfg.n_skills} skills")
    if cfg.n_train < cfg.n_devices:
        fail("n_train", f"n_train {cfg.n_train} cannot fill {cfg.n_devices} devices")
    for key in ("n_layers", "n_skills", "skill_rank", "n_eval"):
        if getattr(cfg, key) < 1:
            fail(key, f"{key} must be >= 1")
    if cfg.width < 2:
        fail("width", "width must be >= 2")
    if cfg.skew_site:
        try:
            site = SiteId.parse(cfg.skew_site)
        except ValueError as e:
            fail("skew_site", str(e))
        if site.layer >= cfg.n_layers:
            fail("skew_site", f"site {cfg.skew_site} not in a {cfg.n_layers}-layer model")
    for build in (cfg.train_config, cfg.task_spec):
        try:
            build()
        except ValueError as e:
            msg = str(e)
            key = next((k for k in _FIELDS if re.search(rf"\b{k}\b", msg)), None)
            raise ConfigError(msg, where.get(key)) from None


def output_dir(cfg: ExperimentConfig, out=None) -> Path:
    root = out or cfg.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    return Path(root) / cfg.name()


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _eval_gates(server, x):
    """Per-site mean gate of every rank expert on ``x``; module gates repeat across their ranks."""
    routed = {s: ad for s, ad in server.adapters.items() if isinstance(ad, MixtureAdapter)}
    if not routed:
        return {}
    _, tape = forward(server.base, server.adapters, x, keep=True)
    gates = mean_gates(server.adapters, tape)
    out = {}
    for s, ad in routed.items():
        g = np.asarray(gates[s])
        if ad.site.n_experts != ad.site.a.shape[0]:
            g = g[ad.site.owner]
        out[s.label] = g.tolist()
    return out


def execute(cfg: ExperimentConfig, dest: Path) -> List[dict]:
    """Run one experiment and write every output file into ``dest``."""
    base, skills, task = cfg.task_spec().build(cfg.seed)
    modules = [sk.module for sk in skills]
    train = cfg.train_config()
    dest.mkdir(parents=True, exist_ok=True)
    ckpt_dir = dest / "checkpoints"
    if cfg.export_checkpoints:
        ckpt_dir.mkdir(exist_ok=True)

    def checkpoint(server):
        rnd = server.round
        last = rnd == train.rounds or train.method == "linear_merge"
        if not cfg.export_checkpoints or (rnd % cfg.checkpoint_every and not last):
            return
        doc = {
            "round": rnd,
            "quotas": {s.label: q for s, q in zip(server.sites, server.quotas)} if server.quotas else {},
            "routers": {s.label: r.tolist() for s, r in server.router_weights().items()},
            "mean_eval_gates": _eval_gates(server, task.x_eval),
        }
        _json_dump(doc, ckpt_dir / f"round_{rnd:03d}.json")

    metrics = run(train, modules, base, task, callback=checkpoint)
    records = [m.to_record() for m in metrics]
    (dest / "metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    rows, total = [], 0
    for r in records:
        total += r["uplink_bytes"] + r["downlink_bytes"]
        rows.append([r["round"], repr(r["eval_loss"]), "" if r["train_loss"] is None else repr(r["train_loss"]),
                     r["uplink_bytes"], r["downlink_bytes"], total])
    (dest / "summary.csv").write_text(
        _csv_text(["round", "eval_loss", "train_loss", "uplink_bytes", "downlink_bytes", "bytes_cumulative"], rows)
    )
    labels = [s.label for s in base.sites]
    (dest / "quotas.csv").write_text(
        _csv_text(["round"] + labels, [[r["round"]] + list(r["quotas"]) for r in records if r["quotas"]])
    )
    if cfg.export_dataset:
        export_jsonl(dest / "train.jsonl", task.x_train, task.y_train)
        export_jsonl(dest / "eval.jsonl", task.x_eval, task.y_eval)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "task_hash": cfg.task_hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "sites": labels,
        "experts_per_site": {s.label: sum(m.rank for m in modules) for s in base.sites},
        "skill_ranks": [m.rank for m in modules],
        "versions": {"rankfed": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    _json_dump(manifest, dest / "manifest.json")
    return records


def cmd_run(config_path, overrides=(), out=None) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    dest = output_dir(cfg, out)
    try:
        records = execute(cfg, dest)
    except (OSError, ValueError, FloatingPointError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    print(f"{cfg.name()}: final eval loss {records[-1]['eval_loss']:.6g} -> {dest}")
    return 0


def _load_run(run_dir):
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        records = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines() if l.strip()]
    except (OSError, ValueError) as e:
        raise ConfigError(f"not a completed run: {e}", str(run_dir)) from None
    if not records:
        raise ConfigError("run has no metrics", str(run_dir))
    return manifest, records


def rounds_to_threshold(records, threshold):
    """First round whose eval loss is at or below ``threshold``, with bytes spent up to it."""
    total = 0
    for r in records:
        total += r["uplink_bytes"] + r["downlink_bytes"]
        if r["eval_loss"] <= threshold:
            return r["round"], total
    return None, None


def compare_rows(run_dirs, threshold=None):
    runs = [(str(d), *_load_run(d)) for d in run_dirs]
    if len(runs) < 2:
        raise ConfigError("compare needs at least two runs")
    task = runs[0][1]["task_hash"]
    for d, man, _ in runs[1:]:
        if man["task_hash"] != task:
            raise ConfigError(f"task differs from {runs[0][0]}", d)
    if threshold is None:
        merged = [rec for _, man, rec in runs if man["method"] == "linear_merge"]
        if merged:
            threshold = merged[0][-1]["eval_loss"]
    rows = []
    for d, man, rec in runs:
        r2t, b2t = rounds_to_threshold(rec, threshold) if threshold is not None else (None, None)
        total = sum(r["uplink_bytes"] + r["downlink_bytes"] for r in rec)
        rows.append([Path(d).name, man["method"], man["seed"], repr(rec[-1]["eval_loss"]),
                     "" if r2t is None else r2t, "" if b2t is None else b2t, total])
    header = ["run", "method", "seed", "final_eval_loss", "rounds_to_threshold", "bytes_to_threshold", "bytes_total"]
    return header, rows, threshold


def cmd_compare(run_dirs, threshold=None, out=None) -> int:
    try:
        header, rows, threshold = compare_rows(run_dirs, threshold)
    except ConfigError as e:
        print(f"compare error: {e}", file=sys.stderr)
        return 2
    text = _csv_text(header, rows)
    if threshold is not None:
        log.info("threshold %r", threshold)
    _emit(text, out)
    return 0


def inspect_rows(run_dir, site):
    run_dir = Path(run_dir)
    manifest, _ = _load_run(run_dir)
    if site not in manifest["sites"]:
        raise ConfigError(f"unknown site {site!r}; run has {', '.join(manifest['sites'])}")
    ckpts = sorted((run_dir / "checkpoints").glob("round_*.json"))
    if not ckpts:
        raise ConfigError("run has no checkpoints", str(run_dir))
    rows, width = [], None
    for path in ckpts:
        doc = json.loads(path.read_text())
        gates = doc["mean_eval_gates"].get(site)
        if gates is None:
            raise ConfigError(f"{manifest['method']} run has no routed experts", str(run_dir))
        width = len(gates)
        rows.append([doc["round"], doc["quotas"].get(site, "")] + [repr(g) for g in gates])
    return ["round", "quota"] + [f"expert_{i}" for i in range(width)], rows


def cmd_inspect(run_dir, site, out=None) -> int:
    try:
        header, rows = inspect_rows(run_dir, site)
    except ConfigError as e:
        print(f"inspect error: {e}", file=sys.stderr)
        return 2
    _emit(_csv_text(header, rows), out)
    return 0


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _split_overrides(extra):
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            key, val = tok[2:], extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"override {tok} has no value")
        pairs.append((key, val))
    return pairs


def build_parser():
    p = argparse.ArgumentParser(prog="rankfed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run one experiment; extra --key value pairs override the config")
    r.add_argument("--config", help="TOML config or a previous run's manifest.json")
    r.add_argument("--out", help="output root (overrides output_dir and $%s)" % OUTPUT_ROOT_ENV)
    c = sub.add_parser("compare", help="side-by-side CSV of finished runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--threshold", type=float, help="eval-loss threshold (default: a linear_merge run's loss)")
    c.add_argument("--out", help="write CSV here instead of stdout")
    i = sub.add_parser("inspect", help="per-expert mean gates and quota trajectory for one site")
    i.add_argument("run")
    i.add_argument("site", help="site label such as L0.Q")
    i.add_argument("--out", help="write CSV here instead of stdout")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.verb == "run":
        try:
            overrides = _split_overrides(extra)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return 2
        return cmd_run(args.config, overrides, args.out)
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if args.verb == "compare":
        return cmd_compare(args.runs, args.threshold, args.out)
    return cmd_inspect(args.run, args.site, args.out)


if __name__ == "__main__":
    sys.exit(main())
