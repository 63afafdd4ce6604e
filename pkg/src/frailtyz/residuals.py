"""Cox-Snell, martingale, deviance, censored Z and randomized Z residuals.

All kinds are computed conditionally on the fitted cluster frailties.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from ._seeding import record_uniforms
from .data import SurvivalDataset
from .frailty import FrailtyFit

KINDS = ("cox_snell", "martingale", "deviance", "censored_z", "z")

#: RSPs are clamped to [CLAMP, 1 - CLAMP] before the normal quantile
CLAMP = 1e-12


def norm_cdf(x):
    return special.ndtr(x)


def norm_ppf(p):
    return special.ndtri(p)


@dataclass(frozen=True, eq=False)
class ResidualSet:
    kind: str
    values: np.ndarray
    status: np.ndarray
    linear_predictors: np.ndarray
    record_id: np.ndarray
    clusters: tuple[str, ...]
    seed: int | None = None
    n_clamped: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}")

    def __len__(self) -> int:
        return self.values.size

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id", "cluster", "kind", "value", "status", "linear_predictor", "seed"])
            seed = "" if self.seed is None else self.seed
            for rid, c, v, s, lp in zip(self.record_id, self.clusters, self.values,
                                        self.status, self.linear_predictors):
                w.writerow([int(rid), c, self.kind, repr(float(v)), int(s), repr(float(lp)), seed])

    @classmethod
    def from_csv(cls, path) -> ResidualSet:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        seed = rows[0]["seed"] if rows else ""
        return cls(
            kind=rows[0]["kind"],
            values=np.array([float(r["value"]) for r in rows]),
            status=np.array([int(r["status"]) for r in rows], dtype=np.int8),
            linear_predictors=np.array([float(r["linear_predictor"]) for r in rows]),
            record_id=np.array([int(r["record_id"]) for r in rows], dtype=np.int64),
            clusters=tuple(r["cluster"] for r in rows),
            seed=int(seed) if seed != "" else None,
        )


def _make(kind, values, fit, dataset, eta=None, seed=None, n_clamped=0) -> ResidualSet:
    if eta is None:
        eta = fit.linear_predictor(dataset)
    values = np.asarray(values, dtype=float)
    values.setflags(write=False)
    return ResidualSet(kind, values, dataset.status.copy(), eta, dataset.record_id.copy(),
                       tuple(dataset.clusters), seed, n_clamped)


def _cumhaz(fit: FrailtyFit, dataset: SurvivalDataset):
    eta = fit.linear_predictor(dataset)
    return np.exp(eta) * fit.baseline(dataset.time), eta


def cox_snell(fit: FrailtyFit, dataset: SurvivalDataset) -> ResidualSet:
    """``-log S(y)``, which equals the fitted cumulative hazard at ``y``."""
    r, eta = _cumhaz(fit, dataset)
    return _make("cox_snell", r, fit, dataset, eta)


def martingale(fit: FrailtyFit, dataset: SurvivalDataset) -> ResidualSet:
    r, eta = _cumhaz(fit, dataset)
    return _make("martingale", dataset.status - r, fit, dataset, eta)


def deviance_values(mart: np.ndarray, status: np.ndarray) -> np.ndarray:
    """Signed square-root transform of martingale residuals (``0 log 0 = 0``)."""
    mart = np.asarray(mart, dtype=float)
    d = np.asarray(status, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logterm = np.where(d > 0, d * np.log(d - mart), 0.0)
    inner = -2.0 * (mart + logterm)
    bad = ~np.isfinite(inner)
    if np.any(bad):
        raise FloatingPointError(f"non-finite deviance residual at record index {int(np.flatnonzero(bad)[0])}")
    # rounding can leave tiny negatives when mart is ~0
    return np.sign(mart) * np.sqrt(np.clip(inner, 0.0, None))


def deviance(fit: FrailtyFit, dataset: SurvivalDataset) -> ResidualSet:
    r, eta = _cumhaz(fit, dataset)
    return _make("deviance", deviance_values(dataset.status - r, dataset.status), fit, dataset, eta)


def _clamped_z(p: np.ndarray) -> tuple[np.ndarray, int]:
    clipped = np.clip(p, CLAMP, 1.0 - CLAMP)
    return -norm_ppf(clipped), int(np.count_nonzero(clipped != p))


def censored_z(fit: FrailtyFit, dataset: SurvivalDataset) -> ResidualSet:
    """``-Phi^{-1}(S(y))`` at the observed time, censored or not."""
    eta = fit.linear_predictor(dataset)
    s = np.exp(-np.exp(eta) * fit.baseline(dataset.time))
    z, clamped = _clamped_z(s)
    return _make("censored_z", z, fit, dataset, eta, n_clamped=clamped)


def randomize(surv: np.ndarray, status: np.ndarray, seed: int, record_ids) -> np.ndarray:
    """Randomized survival probabilities.

    Events keep ``S(y)``; censored records get ``U * S(y)`` with ``U`` uniform
    on (0, 1), drawn per record id so subsets keep their draws.
    """
    surv = np.asarray(surv, dtype=float)
    status = np.asarray(status)
    u = record_uniforms(seed, record_ids)
    return np.where(status == 1, surv, u * surv)


def rsp(fit: FrailtyFit, dataset: SurvivalDataset, seed: int) -> np.ndarray:
    return randomize(fit.survival(dataset), dataset.status, seed, dataset.record_id)


def z_residual(fit: FrailtyFit, dataset: SurvivalDataset, seed: int) -> ResidualSet:
    """Normal-quantile transform of the randomized survival probabilities.

    Standard normal under the true model. Regenerating with the same seed
    reproduces the values exactly.
    """
    eta = fit.linear_predictor(dataset)
    s = np.exp(-np.exp(eta) * fit.baseline(dataset.time))
    z, clamped = _clamped_z(randomize(s, dataset.status, seed, dataset.record_id))
    return _make("z", z, fit, dataset, eta, seed=int(seed), n_clamped=clamped)


def compute(kind: str, fit: FrailtyFit, dataset: SurvivalDataset, seed: int | None = None) -> ResidualSet:
    """Dispatch by kind name; ``seed`` is required for ``"z"``."""
    kind = {"cs": "cox_snell", "censored-z": "censored_z"}.get(kind, kind)
    if kind == "z":
        if seed is None:
            raise ValueError("z residuals need an explicit seed")
        return z_residual(fit, dataset, seed)
    funcs = {"cox_snell": cox_snell, "martingale": martingale,
             "deviance": deviance, "censored_z": censored_z}
    if kind not in funcs:
        raise ValueError(f"unknown residual kind {kind!r}")
    return funcs[kind](fit, dataset)
