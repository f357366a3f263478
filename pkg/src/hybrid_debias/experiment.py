"""Seed-aggregated experiments and hyperparameter sweeps.

A run trains one method on the reference-style synthetic benchmark for every
seed, evaluates on the unbiased test set and aggregates mean and 95% t-interval
half-widths.  Artifacts per run directory::

    report.json            RunReport (config echo, per-seed results, aggregates)
    seed_<s>.json          EvalReport + epoch history of one seed
    history_seed<s>.jsonl  the same history, one JSON object per epoch
    results.csv            one CSV row (columns in CSV_COLUMNS)
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .datagen import DatasetSpec, generate_dataset, make_unbiased_test, reduce_dataset
from .debias import METHODS, DebiasConfig, train
from .evaluation import EvalReport, accuracy

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "method", "p", "sigma", "alpha", "beta", "t_bc", "selection_mode", "seed_count",
    "overall_acc_mean", "overall_acc_ci", "conflicting_acc_mean", "conflicting_acc_ci",
    "aligned_acc_mean", "aligned_acc_ci", "epochs", "wallclock_s",
]
METRICS = ("overall_acc", "aligned_acc", "conflicting_acc")
SWEEPABLE = ("alpha", "beta", "t_bc")


def reference_dataset() -> DatasetSpec:
    return DatasetSpec(samples_per_class=600, sigma=0.05, p=0.5)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=reference_dataset)
    method: str = "hybrid"
    debias: DebiasConfig = field(default_factory=DebiasConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    test_n: int = 2000
    test_seed: int = 10_000
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        self.dataset.validate()
        self.debias.validate()
        if self.test_n <= 0 or self.test_n % self.dataset.num_classes:
            raise ValueError("test_n must be a positive multiple of num_classes")

    def to_dict(self) -> dict:
        return {"dataset": self.dataset.to_dict(), "method": self.method, "debias": self.debias.to_dict(),
                "seeds": list(self.seeds), "test_n": self.test_n, "test_seed": self.test_seed,
                "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        ds = DatasetSpec.from_dict({**reference_dataset().to_dict(), **d.pop("dataset", {})})
        dc = d.pop("debias", {})
        debias = DebiasConfig(**{k: v for k, v in dc.items() if k in {f.name for f in dataclasses.fields(DebiasConfig)}})
        known = {f.name for f in dataclasses.fields(cls)} - {"dataset", "debias"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(dataset=ds, debias=debias, **d)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with top-level, dataset or debias fields replaced by name."""
        ds_fields = {f.name for f in dataclasses.fields(DatasetSpec)}
        db_fields = {f.name for f in dataclasses.fields(DebiasConfig)}
        ds_kw = {k: v for k, v in kw.items() if k in ds_fields}
        db_kw = {k: v for k, v in kw.items() if k in db_fields}
        top = {k: v for k, v in kw.items() if k not in ds_fields and k not in db_fields}
        return dataclasses.replace(self, dataset=dataclasses.replace(self.dataset, **ds_kw),
                                   debias=dataclasses.replace(self.debias, **db_kw), **top)


def ci95(values) -> Optional[float]:
    """Half-width of the 95% t-interval of the mean; None for fewer than 2 values."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return None
    return float(stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))


def summarize(values) -> dict:
    v = [x for x in values if x is not None]
    if not v:
        return {"mean": None, "ci": None, "min": None, "max": None, "n": 0}
    return {"mean": float(np.mean(v)), "ci": ci95(v), "min": float(min(v)), "max": float(max(v)), "n": len(v)}


@dataclass
class SeedResult:
    seed: int
    status: str  # "ok" or "error"
    eval: Optional[EvalReport] = None
    history: list = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "status": self.status, "eval": self.eval.to_dict() if self.eval else None,
                "history": self.history, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedResult":
        ev = EvalReport.from_dict(d["eval"]) if d.get("eval") else None
        return cls(d["seed"], d["status"], ev, d.get("history", []), d.get("error"))


@dataclass
class RunReport:
    config: dict
    per_seed: list  # of SeedResult
    metrics: dict  # metric name -> summarize() dict
    partial: bool
    wallclock_s: float = 0.0

    @classmethod
    def build(cls, config: dict, per_seed: list, wallclock_s: float = 0.0) -> "RunReport":
        ok = [r for r in per_seed if r.status == "ok"]
        metrics = {m: summarize([getattr(r.eval, m) for r in ok]) for m in METRICS}
        return cls(config, per_seed, metrics, partial=len(ok) != len(per_seed), wallclock_s=wallclock_s)

    def mean(self, metric: str) -> Optional[float]:
        return self.metrics[metric]["mean"]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"config": self.config, "per_seed": [r.to_dict() for r in self.per_seed],
             "metrics": self.metrics, "partial": self.partial}
        if include_timing:
            d["wallclock_s"] = self.wallclock_s
        return d

    def fingerprint(self) -> str:
        """Canonical JSON of everything except wall-clock time."""
        return json.dumps(self.to_dict(include_timing=False), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["config"], [SeedResult.from_dict(r) for r in d["per_seed"]], d["metrics"], d["partial"],
                   d.get("wallclock_s", 0.0))

    def csv_row(self) -> dict:
        cfg = self.config
        row = {"method": cfg["method"], "p": cfg["dataset"]["p"], "sigma": cfg["dataset"]["sigma"],
               "alpha": cfg["debias"]["alpha"], "beta": cfg["debias"]["beta"], "t_bc": cfg["debias"]["t_bc"],
               "selection_mode": cfg["debias"]["selection_mode"], "seed_count": self.metrics["overall_acc"]["n"],
               "epochs": cfg["debias"]["epochs"], "wallclock_s": round(self.wallclock_s, 3)}
        for m in METRICS:
            row[f"{m}_mean"] = self.metrics[m]["mean"]
            row[f"{m}_ci"] = self.metrics[m]["ci"]
        return row


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in CSV_COLUMNS})
    return buf.getvalue()


_FLOAT_COLUMNS = {"p", "sigma", "alpha", "beta", "t_bc", "wallclock_s"} | {f"{m}_{s}" for m in METRICS for s in ("mean", "ci")}


def read_csv_rows(text: str) -> list[dict]:
    """Parse rows written by :func:`rows_to_csv`, restoring numeric types."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        if list(raw) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {list(raw)}")
        row = {}
        for k, v in raw.items():
            if v == "":
                row[k] = None
            elif k in _FLOAT_COLUMNS:
                row[k] = float(v)
            elif k in ("seed_count", "epochs"):
                row[k] = int(v)
            else:
                row[k] = v
        rows.append(row)
    return rows


class _DataCache:
    """Full dataset and test set are shared by all seeds of a config."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: ExperimentConfig):
        key = (cfg.dataset, cfg.test_n, cfg.test_seed)
        if key not in self._store:
            full_spec = dataclasses.replace(cfg.dataset, p=1.0)
            self._store[key] = (generate_dataset(full_spec), make_unbiased_test(full_spec, cfg.test_n, cfg.test_seed))
        return self._store[key]


_cache = _DataCache()


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    full, test = _cache.get(cfg)
    train_ds = reduce_dataset(full, cfg.dataset.p, seed)
    result = train(cfg.method, train_ds, dataclasses.replace(cfg.debias, seed=seed), eval_ds=test)
    return SeedResult(seed, "ok", accuracy(result.model_d, test), result.history)


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Train and evaluate ``cfg.method`` once per seed and aggregate.

    A failing seed is recorded with its error and the report is marked
    partial; the remaining seeds still run.
    """
    cfg.validate()
    t0 = time.perf_counter()
    per_seed = []
    for seed in cfg.seeds:
        try:
            res = run_seed(cfg, seed)
        except Exception as exc:  # recorded, not fatal for the other seeds
            log.warning("seed %s failed: %s", seed, exc)
            res = SeedResult(seed, "error", error=f"{type(exc).__name__}: {exc}")
        else:
            log.info("%s seed %s: %s", cfg.method, seed, res.eval)
        per_seed.append(res)
    report = RunReport.build(cfg.to_dict(), per_seed, time.perf_counter() - t0)
    if cfg.output_dir:
        write_run(report, Path(cfg.output_dir))
    return report


def write_run(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for r in report.per_seed:
        _atomic_write(out / f"seed_{r.seed}.json", json.dumps(r.to_dict(), indent=1))
        _atomic_write(out / f"history_seed{r.seed}.jsonl", "".join(json.dumps(h) + "\n" for h in r.history))
    _atomic_write(out / "report.json", json.dumps(report.to_dict(), indent=1))
    _atomic_write(out / "results.csv", rows_to_csv([report.csv_row()]))


def aggregate_from_dir(out: Path) -> RunReport:
    """Rebuild a RunReport from the per-seed JSON files of a run directory."""
    out = Path(out)
    config = json.loads((out / "report.json").read_text())["config"]
    per_seed = [SeedResult.from_dict(json.loads((out / f"seed_{s}.json").read_text())) for s in config["seeds"]]
    return RunReport.build(config, per_seed)


def grid_points(grid: dict) -> list[dict]:
    for name in grid:
        if name not in SWEEPABLE:
            raise ValueError(f"cannot sweep {name!r}; choose from {SWEEPABLE}")
        if not grid[name]:
            raise ValueError(f"empty grid for {name!r}")
    if not grid:
        raise ValueError("empty grid")
    names = list(grid)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]


def sweep(base: ExperimentConfig, grid: dict, out_dir: Optional[Path] = None) -> tuple[list[dict], list[RunReport]]:
    """One run_experiment per grid point; returns CSV rows and reports.

    Failures at one point are recorded (empty metrics) and the sweep goes on.
    """
    rows, reports = [], []
    for i, point in enumerate(grid_points(grid)):
        sub = None if out_dir is None else str(Path(out_dir) / ("point_" + "_".join(f"{k}{v}" for k, v in point.items())))
        try:
            cfg = base.with_overrides(output_dir=sub, **point)
            report = run_experiment(cfg)
        except Exception as exc:
            log.warning("grid point %s failed: %s", point, exc)
            cfg_dict = base.to_dict()
            cfg_dict["debias"] = {**cfg_dict["debias"], **point}
            report = RunReport.build(cfg_dict, [SeedResult(-1, "error", error=f"{type(exc).__name__}: {exc}")])
        rows.append(report.csv_row())
        reports.append(report)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _atomic_write(Path(out_dir) / "sweep.csv", rows_to_csv(rows))
    return rows, reports
