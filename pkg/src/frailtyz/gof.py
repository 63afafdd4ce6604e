"""Normality, homogeneity and goodness-of-fit tests applied to residuals.

Method names follow the residual-test convention: ``Z-SW`` is Shapiro-Wilk
on Z-residuals, ``CZ-CSF`` is the censored Shapiro-Francia test on censored
Z-residuals, ``Z-AOV-LP`` is the one-way ANOVA of Z-residuals grouped by the
linear predictor, and so on.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special, stats

from ._seeding import derive_seed
from .data import SurvivalDataset
from .frailty import Covariate, FrailtyFit
from . import residuals as res

METHODS = ("Z-SW", "Z-SF", "Z-KS", "Dev-SW", "CZ-CSF", "Z-AOV-LP", "Z-AOV-COV")
RANDOMIZED = {"Z-SW", "Z-SF", "Z-KS", "Z-AOV-LP", "Z-AOV-COV"}

CENSORED_SF_METHOD = ("Shapiro-Francia correlation on uncensored order statistics; "
                      "Michael-Schucany product-limit plotting positions with Blom "
                      "constant 3/8; Royston (1993) normal approximation with n = "
                      "number of uncensored values")


@dataclass(frozen=True)
class TestReport:
    test_name: str
    statistic: float
    p_value: float
    n: int
    grouping: dict | None = None
    covariate_label: str | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"test_name": self.test_name, "statistic": self.statistic,
             "p_value": self.p_value, "n": self.n}
        if self.grouping is not None:
            d["grouping"] = self.grouping
        if self.covariate_label is not None:
            d["covariate_label"] = self.covariate_label
        if self.notes:
            d["notes"] = self.notes
        return d

    def renamed(self, name: str, covariate_label: str | None = None) -> TestReport:
        return TestReport(name, self.statistic, self.p_value, self.n, self.grouping,
                          covariate_label or self.covariate_label, self.notes)


# ---------------------------------------------------------------------------
# normality tests


def _clean(values) -> np.ndarray:
    x = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("values contain missing or non-finite entries")
    return x


def sw_test(values) -> TestReport:
    """Shapiro-Wilk W with Royston's AS R94 p-value, for 3 <= n <= 5000."""
    x = _clean(values)
    n = x.size
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={n}")
    if np.ptp(x) == 0:
        raise ValueError("Shapiro-Wilk is undefined for constant data")
    w, p = stats.shapiro(x)
    return TestReport("SW", float(w), float(min(max(p, 0.0), 1.0)), n)


def _royston_sf_pvalue(w: float, n: int) -> float:
    u = math.log(n)
    v = math.log(u)
    mu = -1.2725 + 1.0521 * (v - u)
    sigma = 1.0308 - 0.26758 * (v + 2.0 / u)
    if w >= 1.0:
        return 1.0
    z = (math.log(1.0 - w) - mu) / sigma
    return float(special.ndtr(-z))


def _squared_corr(x: np.ndarray, m: np.ndarray) -> float:
    xc = x - x.mean()
    mc = m - m.mean()
    return float((xc @ mc) ** 2 / ((xc @ xc) * (mc @ mc)))


def sf_test(values) -> TestReport:
    """Shapiro-Francia W' (squared correlation with Blom scores), Royston p-value."""
    x = np.sort(_clean(values))
    n = x.size
    if not 5 <= n <= 5000:
        raise ValueError(f"Shapiro-Francia needs 5 <= n <= 5000, got n={n}")
    if np.ptp(x) == 0:
        raise ValueError("Shapiro-Francia is undefined for constant data")
    i = np.arange(1, n + 1)
    m = special.ndtri((i - 0.375) / (n + 0.25))
    w = _squared_corr(x, m)
    return TestReport("SF", w, _royston_sf_pvalue(w, n), n)


def censored_plotting_positions(values, status, a: float = 0.375):
    """Product-limit plotting positions for right-censored data.

    Returns the uncensored values in ascending order and their positions.
    With no censoring the positions reduce to ``(i - a) / (n - 2a + 1)``.
    """
    x = _clean(values)
    d = np.asarray(status).ravel().astype(int)
    n = x.size
    # events before censored values at ties
    order = np.lexsort((1 - d, x))
    xs, ds = x[order], d[order]
    j = np.arange(1, n + 1)
    factors = np.where(ds == 1, (n - j - a + 1) / (n - j - a + 2), 1.0)
    surv = (n - a + 1) / (n - 2 * a + 1) * np.cumprod(factors)
    keep = ds == 1
    return xs[keep], 1.0 - surv[keep]


def sf_test_censored(values, status) -> TestReport:
    """Shapiro-Francia test for multiply right-censored data (needs >= 5 events)."""
    x = _clean(values)
    d = np.asarray(status).ravel().astype(int)
    if d.size != x.size:
        raise ValueError("values and status differ in length")
    k = int(d.sum())
    if k < 5:
        raise ValueError(f"censored Shapiro-Francia needs at least 5 uncensored values, got {k}")
    if k == x.size:
        return sf_test(x).renamed("CSF")
    xu, pos = censored_plotting_positions(x, d)
    if np.ptp(xu) == 0:
        raise ValueError("uncensored values are constant")
    w = _squared_corr(xu, special.ndtri(pos))
    return TestReport("CSF", w, _royston_sf_pvalue(w, min(k, 5000)), x.size,
                      notes={"n_uncensored": k, "method": CENSORED_SF_METHOD})


def ks_test_normal(values) -> TestReport:
    """One-sample Kolmogorov-Smirnov against N(0, 1), asymptotic p-value."""
    x = np.sort(_clean(values))
    n = x.size
    if n < 1:
        raise ValueError("KS test needs at least one value")
    cdf = special.ndtr(x)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return TestReport("KS", d, float(special.kolmogorov(math.sqrt(n) * d)), n)


# ---------------------------------------------------------------------------
# homogeneity of grouped residuals


def equal_width_groups(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Group index (0..k-1) per value and the ``k + 1`` bin edges.

    Bins split ``[min, max]`` evenly and are right-closed; the minimum falls in
    the first bin.
    """
    x = _clean(values)
    if k < 2:
        raise ValueError("need k >= 2 groups")
    lo, hi = float(x.min()), float(x.max())
    edges = np.linspace(lo, hi, k + 1)
    groups = np.searchsorted(edges[1:-1], x, side="left")
    return groups, edges


def anova_homogeneity(resid, grouping_values, k: int = 10) -> TestReport:
    """One-way ANOVA F-test for equal residual means across equal-width bins.

    ``resid`` may be a :class:`ResidualSet` or a plain array. Empty bins are
    dropped before the test.
    """
    y = _clean(resid.values if isinstance(resid, res.ResidualSet) else resid)
    g_vals = _clean(grouping_values)
    if y.size != g_vals.size:
        raise ValueError("residuals and grouping values differ in length")
    groups, edges = equal_width_groups(g_vals, k)
    counts = np.bincount(groups, minlength=k)
    present = np.flatnonzero(counts)
    kk = present.size
    grouping = {"k": k, "edges": edges.tolist(), "counts": counts.tolist(),
                "nonempty_groups": int(kk)}
    if kk < 2:
        raise ValueError("fewer than two nonempty groups")
    n = y.size
    sums = np.bincount(groups, weights=y, minlength=k)[present]
    means = sums / counts[present]
    grand = y.mean()
    ss_between = float(np.sum(counts[present] * (means - grand) ** 2))
    ss_within = float(np.sum((y - (np.bincount(groups, weights=y, minlength=k)
                                   / np.maximum(counts, 1))[groups]) ** 2))
    df1, df2 = kk - 1, n - kk
    notes = {}
    if df2 <= 0 or ss_within <= 1e-14 * max(1.0, ss_between):
        notes["degenerate_variance"] = True
        if ss_between > 1e-14:
            return TestReport("AOV", math.inf, 0.0, n, grouping, notes=notes)
        return TestReport("AOV", 0.0, 1.0, n, grouping, notes=notes)
    f = (ss_between / df1) / (ss_within / df2)
    return TestReport("AOV", float(f), float(stats.f.sf(f, df1, df2)), n, grouping, notes=notes)


# ---------------------------------------------------------------------------
# Kaplan-Meier cumulative hazard of Cox-Snell residuals


@dataclass(frozen=True)
class StepCHF:
    """Kaplan-Meier survivor and ``-log`` of it at each distinct event value."""

    x: np.ndarray
    survival: np.ndarray
    chf: np.ndarray

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.x, np.asarray(t, dtype=float), side="right")
        return np.concatenate(([0.0], self.chf))[idx]

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.chf.tolist()))


def km_chf(cs_residuals, status=None) -> StepCHF:
    """Cumulative hazard ``-log S_KM`` of (possibly censored) residuals."""
    if isinstance(cs_residuals, res.ResidualSet):
        values, status = cs_residuals.values, cs_residuals.status
    else:
        values = cs_residuals
        if status is None:
            status = np.ones(np.size(values), dtype=int)
    x = _clean(values)
    d = np.asarray(status).astype(int)
    if not np.any(d == 1):
        raise ValueError("need at least one uncensored residual")
    uniq, inv = np.unique(x, return_inverse=True)
    events = np.bincount(inv, weights=d, minlength=uniq.size)
    leaving = np.bincount(inv, minlength=uniq.size)
    at_risk = x.size - np.concatenate(([0], np.cumsum(leaving)[:-1]))
    keep = events > 0
    s = np.cumprod(1.0 - events[keep] / at_risk[keep])
    with np.errstate(divide="ignore"):
        chf = -np.log(s)
    return StepCHF(uniq[keep], s, chf)


# ---------------------------------------------------------------------------
# replicated p-values


def pmin(p_values) -> float:
    """Smallest order-statistic upper bound ``min_r min(1, p_(r) J / r)``."""
    p = np.sort(np.asarray(p_values, dtype=float).ravel())
    if p.size == 0:
        raise ValueError("pmin of an empty set")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    J = p.size
    r = np.arange(1, J + 1)
    # J / r first so the r = J term is exactly p_(J)
    return float(np.min(np.minimum(1.0, p * (J / r))))


@dataclass(frozen=True)
class ReplicationReport:
    test_name: str
    p_values: np.ndarray
    p_min: float
    seeds: list[int]
    covariate_label: str | None = None

    @property
    def J(self) -> int:
        return self.p_values.size

    def to_dict(self) -> dict:
        d = {"test_name": self.test_name, "J": self.J, "p_min": self.p_min,
             "p_values": self.p_values.tolist(), "seeds": list(self.seeds)}
        if self.covariate_label is not None:
            d["covariate_label"] = self.covariate_label
        return d

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["test_name", "replicate", "seed", "p_value"])
            for r, (s, p) in enumerate(zip(self.seeds, self.p_values)):
                w.writerow([self.test_name, r, s, repr(float(p))])


def normalize_method(name: str) -> str:
    """Accept CLI spellings such as ``z-aov-lp``."""
    for m in METHODS:
        if name.lower() == m.lower():
            return m
    raise ValueError(f"unknown test method {name!r}; choose from {', '.join(METHODS)}")


def run_test(method: str, fit: FrailtyFit, dataset: SurvivalDataset, seed: int | None = None,
             covariate: Covariate | None = None, k: int = 10,
             z: res.ResidualSet | None = None) -> TestReport:
    """Compute the residuals ``method`` needs and apply the test.

    Randomized methods need ``seed`` (or precomputed Z-residuals ``z``).
    ``Z-AOV-COV`` groups by ``covariate``.
    """
    method = normalize_method(method)
    if method in RANDOMIZED and z is None:
        if seed is None:
            raise ValueError(f"{method} uses randomized residuals and needs a seed")
        z = res.z_residual(fit, dataset, seed)
    if method == "Z-SW":
        return sw_test(z.values).renamed(method)
    if method == "Z-SF":
        return sf_test(z.values).renamed(method)
    if method == "Z-KS":
        return ks_test_normal(z.values).renamed(method)
    if method == "Z-AOV-LP":
        return anova_homogeneity(z, z.linear_predictors, k).renamed(method, "LP")
    if method == "Z-AOV-COV":
        if covariate is None:
            raise ValueError("Z-AOV-COV needs a covariate to group by")
        return anova_homogeneity(z, covariate.values(dataset), k).renamed(method, covariate.label)
    if method == "Dev-SW":
        return sw_test(res.deviance(fit, dataset).values).renamed(method)
    cz = res.censored_z(fit, dataset)
    return sf_test_censored(cz.values, cz.status).renamed(method)


def _replicate_chunk(args):
    fit, dataset, methods, seeds, covariate, k = args
    out = []
    for s in seeds:
        z = res.z_residual(fit, dataset, s)
        out.append([run_test(m, fit, dataset, covariate=covariate, k=k, z=z).p_value
                    for m in methods])
    return out


def replicate_tests(fit: FrailtyFit, dataset: SurvivalDataset, tests: Sequence[str], J: int,
                    seed: int, covariate: Covariate | None = None, k: int = 10,
                    workers: int = 1) -> dict[str, ReplicationReport]:
    """Apply each test to ``J`` regenerated sets of Z-residuals.

    Replicate ``r`` uses seed ``derive_seed(seed, r)``. Deterministic methods
    are computed once and repeated. Results do not depend on ``workers``.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    methods = [normalize_method(t) for t in tests]
    seeds = [derive_seed(seed, r) for r in range(J)]
    randomized = [m for m in methods if m in RANDOMIZED]
    fixed = {m: run_test(m, fit, dataset, covariate=covariate, k=k).p_value
             for m in methods if m not in RANDOMIZED}

    table = np.empty((J, len(randomized)))
    if randomized:
        if workers > 1 and J > 1:
            chunks = np.array_split(np.arange(J), min(workers, J))
            jobs = [(fit, dataset, randomized, [seeds[i] for i in c], covariate, k) for c in chunks]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = [row for part in pool.map(_replicate_chunk, jobs) for row in part]
        else:
            rows = _replicate_chunk((fit, dataset, randomized, seeds, covariate, k))
        table[:] = rows

    reports = {}
    for m in methods:
        p = table[:, randomized.index(m)] if m in RANDOMIZED else np.full(J, fixed[m])
        label = covariate.label if (m == "Z-AOV-COV" and covariate) else ("LP" if m == "Z-AOV-LP" else None)
        reports[m] = ReplicationReport(m, p, pmin(p), seeds, label)
    return reports
