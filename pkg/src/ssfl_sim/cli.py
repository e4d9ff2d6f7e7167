"""Experiment runner: config loading, seeded runs, ablation sweeps and plot-data export.

Verbs::

    ssfl-sim run    [--config FILE] [--<field> VALUE ...]
    ssfl-sim sweep  --axis method|energy_threshold|mu --values V1,V2,... [--config FILE] [...]
    ssfl-sim export --kind curves|reliability|confusion --out FILE PATH [PATH ...]

Exit status: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .data import AugmentConfig, PartitionSpec, build_federated_data
from .errors import ConfigError, TrainingError
from .federation import METHODS, RunConfig, run_training

log = logging.getLogger(__name__)

LOG_FORMAT = "ssfl-round-log"
LOG_VERSION = 1
OUTPUT_ROOT_ENV = "SSFL_OUTPUT_ROOT"
SWEEP_AXES = ("method", "energy_threshold", "mu")
EXPORT_KINDS = ("curves", "reliability", "confusion")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
EXECUTION_KEYS = ("output_dir", "workers", "seeds")


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    classes: int = 6
    dim: int = 16
    n_per_class: int = 600
    spread: float = 1.0
    separation: float = 3.0
    test_fraction: float = 0.2
    n_labeled: int = 30
    partition: str = "iid"
    dirichlet_alpha: float = 0.3
    # augmentation
    weak_noise_std: float = 0.05
    strong_noise_std: float = 0.2
    strong_mask_fraction: float = 0.2
    # federation and local training
    rounds: int = 60
    clients: int = 20
    participation: float = 0.25
    hidden: tuple[int, ...] = (64, 64)
    normalize: bool = False
    server_mode: str = "iterations"
    server_iters: int = 50
    server_epochs: int = 5
    server_batch: int = 10
    client_iters: int = 100
    warmup_iters: int = 100
    client_batch: int = 10
    mu: float = 1.0
    tau: float = 0.95
    energy_threshold: float = -5.0
    temperature: float = 1.0
    mixup_alpha: float = 0.75
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    global_momentum: float = 0.5
    aggregation: str = "size"
    method: str = "catchfed"
    # bookkeeping
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    workers: int = 1

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.weak_noise_std, self.strong_noise_std, self.strong_mask_fraction)

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(self.clients, self.partition, self.dirichlet_alpha, seed)

    def run_config(self, seed: int) -> RunConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(RunConfig) if f.name not in ("augment", "seed")}
        return RunConfig(**kw, augment=self.augment(), seed=seed)

    def validate(self) -> "ExperimentConfig":
        """Raise one ``ConfigError`` listing every problem found."""
        problems = []
        for name in ("classes", "dim", "n_per_class", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.spread < 0:
            problems.append("spread must be >= 0")
        if not 0 <= self.test_fraction < 1:
            problems.append("test_fraction must lie in [0, 1)")
        if self.n_labeled < 1 or self.n_labeled % max(self.classes, 1):
            problems.append("n_labeled must be a positive multiple of classes")
        if not self.seeds:
            problems.append("seeds must list at least one seed")
        if not self.hidden or any(h < 1 for h in self.hidden):
            problems.append("hidden must list positive layer widths")
        for build in (self.augment, lambda: self.partition_spec(0), lambda: self.run_config(0)):
            try:
                build()
            except ConfigError as exc:
                problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["seeds"] = list(self.seeds)
        return d

    def to_json_dict(self) -> dict:
        # JSON has no infinities; "inf"/"-inf" strings load back through float()
        return {k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in self.to_dict().items()}


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    """Convert a raw YAML or flag value to the field's declared type."""
    kind = FIELD_TYPES[name]
    if kind == "tuple[int, ...]":
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(int(v) for v in value)
    if kind == "bool":
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if kind == "int":
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, bool):
            raise ValueError(f"not a number: {value!r}")
        return float(value)
    return str(value)


def config_from_mapping(raw: dict | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay ``raw`` on ``base`` (defaults if omitted) and validate the result."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a key-value mapping")
    problems = [f"unknown key {k!r}" for k in raw if k not in FIELD_TYPES]
    values = {}
    for k, v in raw.items():
        if k not in FIELD_TYPES:
            continue
        try:
            values[k] = _coerce(k, v)
        except (TypeError, ValueError) as exc:
            problems.append(f"{k}: {exc}")
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base or ExperimentConfig(), **values).validate()


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        cfg = config_from_mapping(raw, cfg)
    if overrides:
        cfg = config_from_mapping(overrides, cfg)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def resolve_output(output_dir: str) -> Path:
    p = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(",", ":"))


def summarize(records: list[dict]) -> dict:
    accs = [r["test_accuracy"] for r in records]
    pls = [r["pl_accuracy"] for r in records if not r["pl_empty"]]
    if not records:
        return {"rounds": 0, "best_accuracy": None, "final_accuracy": None, "best_pl_accuracy": None,
                "final_pl_accuracy": None, "final_wrong_label_ratio": None, "final_utilization_ratio": None}
    last = records[-1]
    return {
        "rounds": len(records),
        "best_accuracy": max(accs),
        "best_round": int(np.argmax(accs)) + 1,
        "final_accuracy": accs[-1],
        "best_pl_accuracy": max(pls) if pls else None,
        "final_pl_accuracy": last["pl_accuracy"],
        "final_wrong_label_ratio": last["wrong_label_ratio"],
        "final_utilization_ratio": last["utilization_ratio"],
    }


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir: str | Path) -> dict:
    """One seed end to end. Writes ``rounds.jsonl`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "rounds.jsonl"
    started = time.time()
    data = build_federated_data(cfg.classes, cfg.dim, cfg.n_per_class, cfg.spread, cfg.separation,
                                cfg.test_fraction, cfg.n_labeled, cfg.partition_spec(seed), seed)
    run_cfg = cfg.run_config(seed)
    records: list[dict] = []
    # execution-only keys stay out of the log so it is byte-identical across machines and pool sizes
    logged = {k: v for k, v in cfg.to_json_dict().items() if k not in EXECUTION_KEYS}
    header = {"format": LOG_FORMAT, "version": LOG_VERSION, "seed": seed, "config": logged}
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line(header) + "\n")

        def sink(report):
            rec = report.to_dict()
            records.append(rec)
            fh.write(_dump_line(rec) + "\n")
            fh.flush()

        run_training(run_cfg, data, workers=cfg.workers, on_round=sink)
    manifest = {
        "config": cfg.to_json_dict(),
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "round_log": log_path.name,
        "summary": summarize(records),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    manifest["path"] = str(out)
    return manifest


def aggregate_summaries(manifests: list[dict]) -> dict:
    best = [m["summary"]["best_accuracy"] for m in manifests]
    final = [m["summary"]["final_accuracy"] for m in manifests]
    return {
        "seeds": [m["seed"] for m in manifests],
        "best_accuracy": best,
        "mean_best_accuracy": float(np.mean(best)) if best else None,
        "mean_final_accuracy": float(np.mean(final)) if final else None,
    }


def run_all_seeds(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[list[dict], dict]:
    out = Path(out_dir)
    manifests = [run_experiment(cfg, s, out / f"seed_{s}") for s in cfg.seeds]
    summary = aggregate_summaries(manifests)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return manifests, summary


def parse_axis_values(axis: str, values) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {list(SWEEP_AXES)}")
    if isinstance(values, str):
        values = [v.strip() for v in values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for v in values:
        if axis == "method":
            if v not in METHODS:
                raise ConfigError(f"method {v!r} is not one of {sorted(METHODS)}")
            out.append(str(v))
        else:
            try:
                out.append(float(v))
            except ValueError as exc:
                raise ConfigError(f"{axis}: {v!r} is not a number") from exc
    return out


def _value_label(v) -> str:
    if isinstance(v, float):
        return "inf" if v == math.inf else ("-inf" if v == -math.inf else repr(v))
    return str(v)


def _sweep_job(args):
    cfg, seed, out_dir, value = args
    try:
        m = run_experiment(cfg, seed, out_dir)
        m["status"] = "ok"
    except Exception as exc:  # the sweep records the failure and moves on
        log.error("run %s seed %d failed: %s", out_dir, seed, exc)
        m = {"seed": seed, "path": str(out_dir), "status": "failed", "error": f"{type(exc).__name__}: {exc}",
             "summary": summarize([])}
    m["axis_value"] = value
    return m


def run_sweep(base: ExperimentConfig, axis: str, values, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """One run per (value, seed). Writes ``runs.csv`` and ``comparison.csv`` (best accuracy, values as columns)."""
    values = parse_axis_values(axis, values)
    out = Path(out_dir)
    jobs_list = []
    for v in values:
        cfg = dataclasses.replace(base, **{axis: v}).validate()
        for s in base.seeds:
            jobs_list.append((cfg, s, out / f"{axis}={_value_label(v)}" / f"seed_{s}", v))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            manifests = list(pool.map(_sweep_job, jobs_list))
    else:
        manifests = [_sweep_job(j) for j in jobs_list]
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_tables(axis, values, base.seeds, manifests, out)
    return manifests


def write_sweep_tables(axis, values, seeds, manifests, out: Path) -> None:
    keys = ("best_accuracy", "final_accuracy", "best_pl_accuracy", "final_pl_accuracy",
            "final_wrong_label_ratio", "final_utilization_ratio")
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "seed", "status", *keys, "error"])
        for m in manifests:
            s = m["summary"]
            w.writerow([_value_label(m["axis_value"]), m["seed"], m["status"], *[_cell(s.get(k)) for k in keys],
                        m.get("error", "")])
    cells = {(_value_label(m["axis_value"]), m["seed"]): m["summary"]["best_accuracy"] for m in manifests}
    labels = [_value_label(v) for v in values]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *labels])
        for s in seeds:
            w.writerow([s, *[_cell(cells.get((lab, s))) for lab in labels]])
        means = []
        for lab in labels:
            col = [cells.get((lab, s)) for s in seeds]
            means.append(_cell(float(np.mean(col))) if col and all(c is not None for c in col) else "")
        w.writerow(["mean", *means])


def _cell(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def find_manifests(paths) -> list[Path]:
    """Manifest files named directly or found under the given directories."""
    found, missing = [], []
    for p in map(Path, paths):
        if p.is_dir():
            hits = sorted(p.rglob("manifest.json"))
            if not hits:
                missing.append(str(p))
            found.extend(hits)
        elif p.is_file():
            found.append(p)
        else:
            missing.append(str(p))
    if missing:
        raise FileNotFoundError("no run manifest at: " + ", ".join(missing))
    return found


def read_round_log(path: str | Path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty round log")
    header = json.loads(lines[0])
    if header.get("format") != LOG_FORMAT or header.get("version") != LOG_VERSION:
        raise ValueError(f"{path}: not a version {LOG_VERSION} round log")
    return header, [json.loads(l) for l in lines[1:]]


CURVE_COLUMNS = ("round", "lr", "test_accuracy", "pl_accuracy", "pl_empty", "utilization_ratio",
                 "wrong_label_ratio", "ece", "n_pseudo", "n_unpseudo", "n_unlabeled", "warmup_clients")
LOSS_COLUMNS = ("server", "pseudo", "unpseudo", "mixup")


def export_plot_data(manifest_paths, kind: str, out_path: str | Path, rounds: list[int] | None = None) -> int:
    """Write one rectangular CSV of ``kind`` over all runs; returns the number of data rows.

    ``rounds`` selects rounds for the reliability and confusion kinds (default: last round).
    Columns:
      curves:      run, seed, round, lr, test_accuracy, ..., loss_server, loss_pseudo, loss_unpseudo, loss_mixup
      reliability: run, seed, round, bin, lower, upper, mean_confidence, accuracy, count
      confusion:   run, seed, round, true_class, pseudo_label, count
    """
    if kind not in EXPORT_KINDS:
        raise ConfigError(f"kind must be one of {list(EXPORT_KINDS)}")
    manifests = find_manifests(manifest_paths)
    logs = []
    missing = []
    for mpath in manifests:
        m = json.loads(mpath.read_text())
        lpath = mpath.parent / m["round_log"]
        if not lpath.is_file():
            missing.append(str(lpath))
            continue
        logs.append((str(mpath.parent), m["seed"], read_round_log(lpath)[1]))
    if missing:
        raise FileNotFoundError("missing round logs: " + ", ".join(missing))
    n = 0
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        if kind == "curves":
            w.writerow(["run", "seed", *CURVE_COLUMNS, *[f"loss_{c}" for c in LOSS_COLUMNS]])
        elif kind == "reliability":
            w.writerow(["run", "seed", "round", "bin", "lower", "upper", "mean_confidence", "accuracy", "count"])
        else:
            w.writerow(["run", "seed", "round", "true_class", "pseudo_label", "count"])
        for run, seed, records in logs:
            if kind == "curves":
                for r in records:
                    w.writerow([run, seed, *[_cell(r[c]) for c in CURVE_COLUMNS],
                                *[_cell(r["losses"].get(c)) for c in LOSS_COLUMNS]])
                    n += 1
                continue
            wanted = rounds or ([records[-1]["round"]] if records else [])
            by_round = {r["round"]: r for r in records}
            for rd in wanted:
                if rd not in by_round:
                    raise ValueError(f"{run}: round {rd} not in log")
                r = by_round[rd]
                if kind == "reliability":
                    for b, st in enumerate(r["bin_stats"]):
                        w.writerow([run, seed, rd, b, _cell(st["lower"]), _cell(st["upper"]),
                                    _cell(st["mean_confidence"]), _cell(st["accuracy"]), st["count"]])
                        n += 1
                else:
                    for i, row in enumerate(r["confusion"]):
                        for j, c in enumerate(row):
                            w.writerow([run, seed, rd, i, j, c])
                            n += 1
    return n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of config keys")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            hint = "comma-separated integers" if f.type.startswith("tuple") else f.type
            p.add_argument(flag, dest=f.name, default=None, metavar=f.type.split("[")[0].upper(),
                           help=f"{hint} (default {getattr(ExperimentConfig(), f.name)!r})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssfl-sim", description="Desk-scale semi-supervised federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run every configured seed")
    _add_config_flags(run)
    run.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    sw = sub.add_parser("sweep", help="one run per (axis value, seed) plus a comparison table")
    _add_config_flags(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--jobs", type=int, default=1, help="parallel runs")
    ex = sub.add_parser("export", help="write plot data from finished runs")
    ex.add_argument("--kind", required=True, choices=EXPORT_KINDS)
    ex.add_argument("--out", required=True)
    ex.add_argument("--rounds", default=None, help="comma-separated rounds (reliability, confusion)")
    ex.add_argument("paths", nargs="+", help="run directories or manifest files")
    return p


def _overrides(ns) -> dict:
    return {f.name: getattr(ns, f.name) for f in fields(ExperimentConfig) if getattr(ns, f.name, None) is not None}


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.verb == "export":
            rounds = [int(r) for r in ns.rounds.split(",")] if ns.rounds else None
            n = export_plot_data(ns.paths, ns.kind, ns.out, rounds)
            print(f"wrote {n} rows to {ns.out}")
            return EXIT_OK
        cfg = load_config(ns.config, _overrides(ns))
        out = resolve_output(cfg.output_dir)
        if ns.verb == "run":
            if ns.dump_config:
                print(dump_config(cfg), end="")
                return EXIT_OK
            _, summary = run_all_seeds(cfg, out)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return EXIT_OK
        manifests = run_sweep(cfg, ns.axis, ns.values, out, ns.jobs)
        print((out / "comparison.csv").read_text(), end="")
        return EXIT_RUNTIME if any(m["status"] != "ok" for m in manifests) else EXIT_OK
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
