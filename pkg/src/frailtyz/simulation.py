"""Clustered Weibull / gamma-frailty data and rejection-rate experiments.

Failure times follow a Weibull baseline (shape ``alpha``, scale ``lam``,
cumulative hazard ``lam * t**alpha``) multiplied by a cluster frailty with
mean 1 and variance ``frailty_var`` and by ``exp(x1 - 2 log(x2) + 0.5 x3)``.
Censoring times are exponential with rate ``gamma``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize

from ._seeding import derive_seed, rng_for
from .data import SurvivalDataset, save_csv
from .frailty import FitControl, ModelSpec, fit_ppl
from . import gof
from . import residuals as res

log = logging.getLogger(__name__)

COVARIATE_NAMES = ("x1", "x2", "x3")
MODELS = {
    "true": ModelSpec.parse(["x1", "x2:log", "x3"]),
    "wrong": ModelSpec.parse(["x1", "x2", "x3"]),
}
GROUPING_COVARIATE = MODELS["true"].covariates[1]       # log(x2)
DEFAULT_TESTS = ("Z-SW", "Z-SF", "Z-KS", "Dev-SW", "CZ-CSF", "Z-AOV-LP", "Z-AOV-log(x2)")
ALPHA_LEVEL = 0.05
WORKERS_ENV = "FRAILTYZ_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    g: int = 20
    n_i: int = 40
    alpha: float = 3.0
    lam: float = 0.007
    beta_true: tuple[float, float, float] = (1.0, -2.0, 0.5)
    frailty_var: float = 0.5
    censor_rate_target: float = 0.0
    censor_rate_gamma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and self.lam > 0):
            raise ValueError("alpha and lam must be positive")
        if self.frailty_var < 0:
            raise ValueError("frailty_var must be non-negative")
        if self.g < 1 or self.n_i < 1:
            raise ValueError("g and n_i must be at least 1")
        if not 0 <= self.censor_rate_target < 1:
            raise ValueError("censor_rate_target must be in [0, 1)")


def weibull_time(u, z, eta, alpha: float, lam: float):
    """Invert ``S(t) = exp(-z exp(eta) lam t^alpha)`` at probability ``u``."""
    return (-np.log(u) / (lam * z * np.exp(eta))) ** (1.0 / alpha)


def _draw(config: SimConfig, rng: np.random.Generator, n_clusters: int):
    n = n_clusters * config.n_i
    x1 = rng.uniform(0.0, 1.0, n)
    # "positive Normal(0, 1)": half-normal
    x2 = np.abs(rng.standard_normal(n))
    x3 = rng.binomial(1, 0.25, n).astype(float)
    if config.frailty_var > 0:
        k = 1.0 / config.frailty_var
        z = rng.gamma(k, config.frailty_var, n_clusters)
    else:
        z = np.ones(n_clusters)
    u = (rng.integers(0, 2**53, n) + 0.5) * 2.0**-53   # open (0, 1)
    cluster = np.repeat(np.arange(n_clusters), config.n_i)
    b1, b2, b3 = config.beta_true
    eta = b1 * x1 + b2 * np.log(x2) + b3 * x3
    t = weibull_time(u, z[cluster], eta, config.alpha, config.lam)
    return t, cluster, np.column_stack([x1, x2, x3]), z, rng


def generate_dataset(config: SimConfig, rng: np.random.Generator | None = None,
                     return_frailty: bool = False):
    """One simulated dataset; covariates ``x1, x2, x3`` with raw (untransformed) ``x2``.

    A zero censoring target (or ``censor_rate_gamma`` of 0/None) means no
    censoring. Otherwise ``censor_rate_gamma`` must already be resolved, see
    :func:`calibrate_censoring`.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t, cluster, X, z, rng = _draw(config, rng, config.g)
    gamma = config.censor_rate_gamma
    if config.censor_rate_target > 0 and not gamma:
        raise ValueError("censoring target set but censor_rate_gamma is not calibrated")
    if gamma:
        c = rng.exponential(1.0 / gamma, t.size)
        y = np.minimum(t, c)
        status = (t < c).astype(int)
    else:
        y, status = t, np.ones(t.size, dtype=int)
    ds = SurvivalDataset(y, status, [str(c + 1) for c in cluster], X, COVARIATE_NAMES)
    return (ds, z) if return_frailty else ds


def calibrate_censoring(config: SimConfig, target: float, n_pilot: int = 100_000,
                        rng: np.random.Generator | None = None) -> float:
    """Exponential censoring rate giving censoring fraction ``target``.

    Solves ``mean(1 - exp(-gamma t)) = target`` over a pilot sample of failure
    times (the conditional censoring probability, averaged). Returns 0 for a
    zero target.
    """
    if target == 0:
        return 0.0
    if not 0 < target < 1:
        raise ValueError("target must be in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    n_clusters = max(1, math.ceil(n_pilot / config.n_i))
    t = _draw(config, rng, n_clusters)[0]

    def excess(log_gamma):
        return float(np.mean(-np.expm1(-math.exp(log_gamma) * t))) - target

    lo, hi = -40.0, 40.0
    if excess(lo) > 0 or excess(hi) < 0:
        raise RuntimeError("could not bracket the censoring rate")
    return math.exp(optimize.brentq(excess, lo, hi, xtol=1e-10))


def achieved_censoring(config: SimConfig, gamma: float, n_pilot: int = 100_000,
                       rng: np.random.Generator | None = None) -> float:
    """Censored fraction in a fresh pilot sample at rate ``gamma``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed + 1)
    n_clusters = max(1, math.ceil(n_pilot / config.n_i))
    t = _draw(config, rng, n_clusters)[0]
    if gamma == 0:
        return 0.0
    c = rng.exponential(1.0 / gamma, t.size)
    return float(np.mean(c <= t))


# ---------------------------------------------------------------------------
# experiment grid


@dataclass(frozen=True)
class ExperimentGrid:
    cluster_sizes: tuple[int, ...] = (10, 40, 100)
    censor_targets: tuple[float, ...] = (0.0, 0.5)
    n_replicates: int = 200
    models: tuple[str, ...] = ("true", "wrong")
    tests: tuple[str, ...] = DEFAULT_TESTS
    k: int = 10
    base: SimConfig = field(default_factory=SimConfig)
    save_datasets: int = 0

    def __post_init__(self):
        if not self.cluster_sizes or not self.censor_targets or not self.models or not self.tests:
            raise ValueError("grid lists must be nonempty")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be positive")
        for m in self.models:
            if m not in MODELS:
                raise ValueError(f"unknown model {m!r}")
        for t in self.tests:
            _test_method(t)

    @classmethod
    def full_scale(cls, **overrides) -> ExperimentGrid:
        kw = dict(cluster_sizes=tuple(range(10, 101, 10)),
                  censor_targets=(0.0, 0.2, 0.5, 0.8), n_replicates=1000)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentGrid:
        d = dict(d)
        full = d.pop("full_scale", False)
        base_keys = {f for f in SimConfig.__dataclass_fields__}
        base = {k: d.pop(k) for k in list(d) if k in base_keys}
        if "beta_true" in base:
            base["beta_true"] = tuple(base["beta_true"])
        d.pop("seed", None)
        d.pop("parallelism", None)
        for key in ("cluster_sizes", "censor_targets", "models", "tests"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid config keys: {sorted(unknown)}")
        d["base"] = SimConfig(**base)
        return cls.full_scale(**d) if full else cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["base"] = asdict(self.base)
        return out


def _test_method(name: str) -> tuple[str, object]:
    """Map a grid test label to (method, grouping covariate)."""
    if name.startswith("Z-AOV-") and name not in ("Z-AOV-LP", "Z-AOV-COV"):
        label = name[len("Z-AOV-"):]
        if label != GROUPING_COVARIATE.label:
            raise ValueError(f"unsupported grouping covariate {label!r}")
        return "Z-AOV-COV", GROUPING_COVARIATE
    return gof.normalize_method(name), GROUPING_COVARIATE


@dataclass(frozen=True)
class _Task:
    cell: int
    rep: int
    config: SimConfig
    models: tuple[str, ...]
    tests: tuple[str, ...]
    k: int
    seed: int


def _run_replicate(task: _Task) -> dict:
    ds = generate_dataset(task.config, rng_for(task.seed, task.cell, task.rep))
    out = {"cell": task.cell, "rep": task.rep, "censoring": ds.censoring_rate, "models": {}}
    for mi, model in enumerate(task.models):
        try:
            fit = fit_ppl(ds, MODELS[model], FitControl())
        except Exception as exc:                         # recorded, never dropped
            out["models"][model] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            continue
        if not fit.converged:
            out["models"][model] = {"ok": False, "error": fit.message or "not converged"}
            continue
        z = res.z_residual(fit, ds, derive_seed(task.seed, task.cell, task.rep, mi))
        pvals = {}
        for name in task.tests:
            method, cov = _test_method(name)
            try:
                pvals[name] = gof.run_test(method, fit, ds, covariate=cov, k=task.k, z=z).p_value
            except ValueError as exc:
                log.warning("cell %d rep %d %s %s: %s", task.cell, task.rep, model, name, exc)
                pvals[name] = math.nan
        out["models"][model] = {"ok": True, "p": pvals, "theta": fit.theta,
                                "beta": fit.beta.tolist()}
    return out


@dataclass
class GridResult:
    rows: list[dict]
    replicates: list[dict]
    manifest: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["cell", "n_i", "censor_target", "gamma", "achieved_censoring", "model", "test",
                "n_ok", "n_failed", "n_test_errors", "rejections", "rejection_rate", "mc_standard_error"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({c: _fmt(row[c]) for c in cols})
        return buf.getvalue()

    def pvalues_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "replicate", "model", "test", "p_value"])
        for r in self.replicates:
            for model, m in r["models"].items():
                if not m["ok"]:
                    continue
                for test, p in m["p"].items():
                    w.writerow([r["cell"], r["rep"], model, test, _fmt(p)])
        return buf.getvalue()

    def rate(self, n_i: int, censor_target: float, model: str, test: str) -> float:
        for row in self.rows:
            if (row["n_i"], row["censor_target"], row["model"], row["test"]) == (
                    n_i, censor_target, model, test):
                return row["rejection_rate"]
        raise KeyError((n_i, censor_target, model, test))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def default_parallelism() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_grid(grid: ExperimentGrid, parallelism: int | None = None, seed: int = 0,
             dataset_dir: Path | None = None) -> GridResult:
    """Estimate rejection rates at level 0.05 for every grid cell, model and test.

    Each replicate draws its data from ``rng_for(seed, cell, rep)``, so the
    table does not depend on ``parallelism``. Fits that fail or do not
    converge are counted in ``n_failed`` and left out of the rate.
    """
    parallelism = parallelism or default_parallelism()
    started = time.time()
    cells = [(n_i, c) for n_i in grid.cluster_sizes for c in grid.censor_targets]
    configs = []
    for ci, (n_i, target) in enumerate(cells):
        cfg = replace(grid.base, n_i=n_i, censor_rate_target=target, seed=derive_seed(seed, ci))
        gamma = calibrate_censoring(cfg, target, rng=rng_for(seed, ci, 2**32)) if target > 0 else 0.0
        configs.append(replace(cfg, censor_rate_gamma=gamma))

    tasks = [_Task(ci, r, cfg, grid.models, grid.tests, grid.k, seed)
             for ci, cfg in enumerate(configs) for r in range(grid.n_replicates)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_replicate, tasks,
                                    chunksize=max(1, len(tasks) // (4 * parallelism))))
    else:
        results = [_run_replicate(t) for t in tasks]
    results.sort(key=lambda r: (r["cell"], r["rep"]))

    if dataset_dir is not None and grid.save_datasets:
        dataset_dir.mkdir(parents=True, exist_ok=True)
        for ci, cfg in enumerate(configs):
            for r in range(min(grid.save_datasets, grid.n_replicates)):
                ds = generate_dataset(cfg, rng_for(seed, ci, r))
                save_csv(ds, dataset_dir / f"cell{ci}_rep{r}.csv")

    rows = []
    for ci, ((n_i, target), cfg) in enumerate(zip(cells, configs)):
        reps = [r for r in results if r["cell"] == ci]
        achieved = float(np.mean([r["censoring"] for r in reps]))
        for model in grid.models:
            ok = [r["models"][model] for r in reps if r["models"][model]["ok"]]
            failed = len(reps) - len(ok)
            for test in grid.tests:
                p = np.array([m["p"][test] for m in ok], dtype=float)
                valid = p[np.isfinite(p)]
                rej = int(np.count_nonzero(valid < ALPHA_LEVEL))
                rate = rej / valid.size if valid.size else math.nan
                se = math.sqrt(rate * (1 - rate) / valid.size) if valid.size else math.nan
                rows.append({"cell": ci, "n_i": n_i, "censor_target": target,
                             "gamma": cfg.censor_rate_gamma, "achieved_censoring": achieved,
                             "model": model, "test": test, "n_ok": len(ok), "n_failed": failed,
                             "n_test_errors": int(p.size - valid.size), "rejections": rej,
                             "rejection_rate": rate, "mc_standard_error": se})
    manifest = {
        "seed": seed,
        "parallelism": parallelism,
        "grid": grid.to_dict(),
        "cells": [{"cell": ci, "n_i": n_i, "censor_target": t, "gamma": cfg.censor_rate_gamma,
                   "seed": cfg.seed} for ci, ((n_i, t), cfg) in enumerate(zip(cells, configs))],
        "replicate_seed_rule": "numpy SeedSequence(seed, spawn_key=(cell, replicate))",
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": __import__("scipy").__version__},
        "elapsed_seconds": time.time() - started,
    }
    return GridResult(rows, results, manifest)


def write_grid_outputs(result: GridResult, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rejection_rates.csv").write_text(result.to_csv(), encoding="utf-8")
    (out_dir / "pvalues.csv").write_text(result.pvalues_csv(), encoding="utf-8")
    (out_dir / "manifest.json").write_text(json.dumps(result.manifest, indent=2), encoding="utf-8")
