"""Shared gamma-frailty Cox model fitted by penalized partial likelihood.

The inner loop is Newton-Raphson on ``(beta, u)`` for a fixed frailty
variance ``theta``; the outer loop maximizes the profile marginal
log-likelihood of ``theta`` (gamma frailties integrated out in closed form)
with bounded Brent search on ``log(theta)``. Ties use the Breslow
approximation everywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, special

from .data import DataError, SurvivalDataset, SurvivalRecord

log = logging.getLogger(__name__)

TRANSFORMS = ("identity", "log")

SE_METHOD = "inverse negative Hessian of the penalized partial likelihood, beta block"
AIC_DEFINITION = "-2 * profile marginal loglik + 2 * (p + 1 if frailty else p)"


class SingularHessianError(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        what = ", ".join(self.columns) if self.columns else "unknown columns"
        super().__init__(f"singular Hessian; collinear column(s): {what}")


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class Covariate:
    column: str
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")

    @classmethod
    def parse(cls, text: str) -> Covariate:
        """``"age"`` or ``"wbc:log"``."""
        name, _, transform = text.partition(":")
        if not name:
            raise ValueError(f"bad covariate selector {text!r}")
        return cls(name, transform or "identity")

    @property
    def label(self) -> str:
        return f"log({self.column})" if self.transform == "log" else self.column

    def __str__(self) -> str:
        return self.column if self.transform == "identity" else f"{self.column}:{self.transform}"

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self.transform == "log":
            if np.any(values <= 0):
                raise DataError(f"log transform needs a strictly positive column; {self.column!r} is not")
            return np.log(values)
        return values

    def values(self, dataset: SurvivalDataset) -> np.ndarray:
        return self.apply(dataset.column(self.column))


@dataclass(frozen=True)
class ModelSpec:
    covariates: tuple[Covariate, ...] = ()
    frailty: bool = True

    @classmethod
    def parse(cls, selectors: Sequence[str], frailty: bool = True) -> ModelSpec:
        return cls(tuple(Covariate.parse(s) for s in selectors), frailty)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.covariates]

    def design(self, dataset: SurvivalDataset) -> np.ndarray:
        n = len(dataset)
        if not self.covariates:
            return np.empty((n, 0))
        return np.column_stack([c.values(dataset) for c in self.covariates])

    def to_dict(self) -> dict:
        return {"covariates": [str(c) for c in self.covariates], "frailty": self.frailty}

    @classmethod
    def from_dict(cls, d) -> ModelSpec:
        return cls.parse(d["covariates"], d["frailty"])


# ---------------------------------------------------------------------------
# baseline hazard


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step function for the baseline cumulative hazard."""

    event_times: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.event_times, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if t.shape != inc.shape or t.ndim != 1:
            raise ValueError("event_times and increments must be 1-d of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("event times must be strictly increasing")
        object.__setattr__(self, "event_times", t)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "cumulative", np.cumsum(inc))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t, side="right")
        padded = np.concatenate(([0.0], self.cumulative))
        return padded[idx]


class _RiskSets:
    """Sort order and tie structure of the observed times."""

    def __init__(self, time: np.ndarray, status: np.ndarray):
        self.order = np.argsort(time, kind="stable")
        ts = time[self.order]
        self.sorted_time = ts
        self.sorted_status = status[self.order].astype(float)
        n = ts.size
        # first sorted position with the same time (start of the risk set)
        new = np.r_[True, ts[1:] != ts[:-1]]
        self.group_start = np.maximum.accumulate(np.where(new, np.arange(n), 0))
        starts = np.flatnonzero(new)
        d = np.add.reduceat(self.sorted_status, starts)
        keep = d > 0
        self.event_start = starts[keep]
        self.event_times = ts[starts[keep]]
        self.event_counts = d[keep]
        # for each sorted record, number of distinct event times <= its time
        self.n_events_upto = np.searchsorted(self.event_times, ts, side="right")

    def reverse_cumsum(self, values_sorted: np.ndarray) -> np.ndarray:
        return np.cumsum(values_sorted[::-1], axis=0)[::-1]


def _shifted_weights(eta: np.ndarray) -> tuple[np.ndarray, float]:
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("non-finite linear predictor")
    c = float(eta.max())
    return np.exp(eta - c), c


def breslow_baseline(beta, u, dataset: SurvivalDataset, spec: ModelSpec,
                     _rs: _RiskSets | None = None) -> BaselineHazard:
    """Breslow increments ``d_v / sum_{risk set} exp(x beta + u)`` at each distinct event time."""
    eta = linear_predictor(beta, u, dataset, spec)
    rs = _rs or _RiskSets(dataset.time, dataset.status)
    return _breslow(rs, eta)


def _breslow(rs: _RiskSets, eta: np.ndarray) -> BaselineHazard:
    w, c = _shifted_weights(eta)
    s0 = rs.reverse_cumsum(w[rs.order])
    inc = rs.event_counts / s0[rs.event_start] * math.exp(-c)
    return BaselineHazard(rs.event_times.copy(), inc)


def linear_predictor(beta, u, dataset: SurvivalDataset, spec: ModelSpec) -> np.ndarray:
    X = spec.design(dataset)
    beta = np.asarray(beta, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if beta.size != X.shape[1]:
        raise ValueError(f"beta has {beta.size} entries, model has {X.shape[1]} covariates")
    if u.size != dataset.n_clusters:
        raise ValueError(f"u has {u.size} entries, dataset has {dataset.n_clusters} clusters")
    eta = X @ beta + u[dataset.codes]
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("non-finite linear predictor")
    return eta


# ---------------------------------------------------------------------------
# likelihood pieces


def partial_loglik(beta, u, dataset: SurvivalDataset, spec: ModelSpec) -> float:
    """Cox partial log-likelihood with random effects as offsets (Breslow ties)."""
    eta = linear_predictor(beta, u, dataset, spec)
    return _partial_loglik(_RiskSets(dataset.time, dataset.status), eta)


def _partial_loglik(rs: _RiskSets, eta: np.ndarray) -> float:
    w, c = _shifted_weights(eta)
    s0 = rs.reverse_cumsum(w[rs.order])
    ev = rs.sorted_status > 0
    eta_s = eta[rs.order]
    return float(np.sum(eta_s[ev] - c - np.log(s0[rs.group_start[ev]])))


def penalty_loglik(u, theta: float) -> float:
    """Sum of log densities of ``u = log(z)``, ``z ~ Gamma(shape=1/theta, scale=theta)``."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    u = np.asarray(u, dtype=float)
    nu = 1.0 / theta
    return float(np.sum(nu * (u - np.exp(u))) - u.size * (special.gammaln(nu) + nu * math.log(theta)))


def marginal_loglik(beta, baseline: BaselineHazard, dataset: SurvivalDataset,
                    spec: ModelSpec, theta: float) -> float:
    """Log-likelihood with gamma frailties integrated out.

    The baseline hazard is the discrete measure putting mass ``increment`` at
    each event time. ``theta == 0`` gives the no-frailty likelihood.
    """
    X = spec.design(dataset)
    xb = X @ np.asarray(beta, dtype=float)
    status = dataset.status.astype(bool)
    idx = np.searchsorted(baseline.event_times, dataset.time[status])
    if np.any(idx >= baseline.event_times.size) or np.any(
            baseline.event_times[np.minimum(idx, baseline.event_times.size - 1)] != dataset.time[status]):
        raise ValueError("baseline has no mass at some observed event time")
    ll = float(np.sum(xb[status] + np.log(baseline.increments[idx])))
    a = np.bincount(dataset.codes, weights=np.exp(xb) * baseline(dataset.time),
                    minlength=dataset.n_clusters)
    if theta == 0:
        return ll - float(a.sum())
    if theta < 0:
        raise ValueError("theta must be non-negative")
    nu = 1.0 / theta
    d = np.bincount(dataset.codes, weights=dataset.status, minlength=dataset.n_clusters).astype(int)
    # lgamma(nu+d) - lgamma(nu) + nu log nu - (nu+d) log(nu+A), arranged to stay accurate for large nu
    k = np.concatenate([np.arange(di) for di in d]) if d.sum() else np.empty(0)
    la = np.log1p(a / nu)
    return ll + float(np.sum(np.log1p(k / nu)) - np.sum((d + nu) * la))


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitControl:
    tol: float = 1e-6
    outer_tol: float = 1e-5
    max_inner: int = 50
    max_outer: int = 100
    theta_bracket: tuple[float, float] = (1e-4, 10.0)
    theta_init: float = 0.5


@dataclass(frozen=True, eq=False)
class FrailtyFit:
    spec: ModelSpec
    beta: np.ndarray
    u: np.ndarray
    theta: float
    baseline: BaselineHazard
    stderr_beta: np.ndarray
    converged: bool
    inner_iterations: int
    outer_iterations: int
    ppl_trace: list[float]
    outer_trace: list[tuple[float, float]]
    marginal_loglik: float
    aic: float
    cluster_labels: tuple[str, ...]
    data_columns: tuple[str, ...]
    no_frailty_evidence: bool = False
    message: str = ""

    @property
    def covariate_labels(self) -> list[str]:
        return self.spec.labels

    def cluster_effects(self, dataset: SurvivalDataset) -> np.ndarray:
        """Fitted ``u`` of every record's cluster in ``dataset``."""
        pos = {lab: i for i, lab in enumerate(self.cluster_labels)}
        try:
            per_cluster = np.array([self.u[pos[lab]] for lab in dataset.cluster_labels])
        except KeyError as exc:
            raise KeyError(f"cluster {exc.args[0]!r} is not in the fitted model") from None
        return per_cluster[dataset.codes]

    def linear_predictor(self, dataset: SurvivalDataset) -> np.ndarray:
        return self.spec.design(dataset) @ self.beta + self.cluster_effects(dataset)

    def survival(self, dataset: SurvivalDataset, t=None) -> np.ndarray:
        """``S(t)`` for every record; ``t`` defaults to each record's own time."""
        t = dataset.time if t is None else t
        return np.exp(-np.exp(self.linear_predictor(dataset)) * self.baseline(t))

    def to_dict(self) -> dict:
        return {
            "model": self.spec.to_dict(),
            "coefficients": [
                {"name": n, "estimate": float(b), "stderr": float(s)}
                for n, b, s in zip(self.spec.labels, self.beta, self.stderr_beta)
            ],
            "theta": self.theta,
            "frailties": [{"cluster": c, "u": float(v)} for c, v in zip(self.cluster_labels, self.u)],
            "baseline": [[float(t), float(h)] for t, h in
                         zip(self.baseline.event_times, self.baseline.increments)],
            "converged": self.converged,
            "no_frailty_evidence": self.no_frailty_evidence,
            "message": self.message,
            "iterations": {"inner": self.inner_iterations, "outer": self.outer_iterations},
            "ppl_trace": list(self.ppl_trace),
            "outer_trace": [list(p) for p in self.outer_trace],
            "marginal_loglik": self.marginal_loglik,
            "aic": self.aic,
            "data_columns": list(self.data_columns),
            "metadata": {"ties": "breslow", "stderr_method": SE_METHOD,
                         "aic_definition": AIC_DEFINITION},
        }

    @classmethod
    def from_dict(cls, d) -> FrailtyFit:
        base = np.array(d["baseline"], dtype=float).reshape(-1, 2)
        return cls(
            spec=ModelSpec.from_dict(d["model"]),
            beta=np.array([c["estimate"] for c in d["coefficients"]], dtype=float),
            u=np.array([f["u"] for f in d["frailties"]], dtype=float),
            theta=float(d["theta"]),
            baseline=BaselineHazard(base[:, 0], base[:, 1]),
            stderr_beta=np.array([c["stderr"] for c in d["coefficients"]], dtype=float),
            converged=bool(d["converged"]),
            inner_iterations=int(d["iterations"]["inner"]),
            outer_iterations=int(d["iterations"]["outer"]),
            ppl_trace=list(d["ppl_trace"]),
            outer_trace=[tuple(p) for p in d["outer_trace"]],
            marginal_loglik=float(d["marginal_loglik"]),
            aic=float(d["aic"]),
            cluster_labels=tuple(f["cluster"] for f in d["frailties"]),
            data_columns=tuple(d["data_columns"]),
            no_frailty_evidence=bool(d.get("no_frailty_evidence", False)),
            message=d.get("message", ""),
        )


def survival_prob(fit: FrailtyFit, record: SurvivalRecord, t: float) -> float:
    """``exp(-exp(x beta + u) H0(t))`` with the cluster's fitted frailty held fixed.

    ``record.covariates`` are read in the column order of the data the model
    was fitted on.
    """
    try:
        k = fit.cluster_labels.index(str(record.cluster))
    except ValueError:
        raise KeyError(f"cluster {record.cluster!r} is not in the fitted model") from None
    raw = dict(zip(fit.data_columns, record.covariates))
    x = np.array([c.apply(raw[c.column]) for c in fit.spec.covariates], dtype=float)
    eta = float(x @ fit.beta) + float(fit.u[k])
    return math.exp(-math.exp(eta) * float(fit.baseline(t)))


class _Problem:
    """PPL value, gradient and negative Hessian for one dataset and model."""

    def __init__(self, dataset: SurvivalDataset, spec: ModelSpec):
        self.X = spec.design(dataset)
        self.codes = dataset.codes
        self.status = dataset.status.astype(float)
        self.n, self.p = self.X.shape
        self.g = dataset.n_clusters
        self.frailty = spec.frailty
        self.rs = _RiskSets(dataset.time, dataset.status)
        self.labels = spec.labels
        self.dim = self.p + (self.g if self.frailty else 0)

    def split(self, params):
        if self.frailty:
            return params[:self.p], params[self.p:]
        return params, np.zeros(self.g)

    def eta(self, params):
        beta, u = self.split(params)
        return self.X @ beta + u[self.codes]

    def value(self, params, theta) -> float:
        eta = self.eta(params)
        if not np.all(np.isfinite(eta)):
            return -np.inf
        val = _partial_loglik(self.rs, eta)
        if self.frailty:
            val += penalty_loglik(self.split(params)[1], theta)
        return val

    def derivatives(self, params, theta):
        """Value, gradient and negative Hessian of the PPL."""
        rs = self.rs
        eta = self.eta(params)
        w, c = _shifted_weights(eta)
        o = rs.order
        ws = w[o]
        s0 = rs.reverse_cumsum(ws)
        s0_ev = s0[rs.event_start]
        lam = rs.event_counts / s0_ev                       # shifted hazard jumps
        cumlam = np.concatenate(([0.0], np.cumsum(lam)))
        hs = cumlam[rs.n_events_upto]                        # shifted H0(y) per sorted record
        ev = rs.sorted_status > 0
        value = float(np.sum(eta[o][ev] - c - np.log(s0[rs.group_start[ev]])))

        Xs = self.X[o]
        cs = self.codes[o]
        wh = ws * hs
        resid = rs.sorted_status - wh                       # martingale residuals

        # risk-set means of the design columns at each event time
        s1x = rs.reverse_cumsum(ws[:, None] * Xs)[rs.event_start]
        ax = s1x / s0_ev[:, None]
        grad_b = Xs.T @ resid
        hbb = (Xs * wh[:, None]).T @ Xs - (ax * rs.event_counts[:, None]).T @ ax
        if not self.frailty:
            return value, grad_b, hbb

        beta, u = self.split(params)
        onehot_w = np.zeros((self.n, self.g))
        onehot_w[np.arange(self.n), cs] = ws
        au = rs.reverse_cumsum(onehot_w)[rs.event_start] / s0_ev[:, None]
        grad_u = np.bincount(cs, weights=resid, minlength=self.g)
        xu = np.zeros((self.p, self.g))
        for j in range(self.p):
            xu[j] = np.bincount(cs, weights=wh * Xs[:, j], minlength=self.g)
        d = rs.event_counts
        hbu = xu - (ax * d[:, None]).T @ au
        huu = np.diag(np.bincount(cs, weights=wh, minlength=self.g)) - (au * d[:, None]).T @ au

        ez = np.exp(u)
        value += penalty_loglik(u, theta)
        grad_u = grad_u + (1.0 - ez) / theta
        huu = huu + np.diag(ez / theta)
        grad = np.concatenate([grad_b, grad_u])
        H = np.block([[hbb, hbu], [hbu.T, huu]])
        return value, grad, H

    def collinear_columns(self) -> list[str]:
        """Covariates that add nothing to the span of earlier ones plus a constant."""
        basis = np.ones((self.n, 1))
        bad = []
        for j, name in enumerate(self.labels):
            trial = np.column_stack([basis, self.X[:, j]])
            if np.linalg.matrix_rank(trial) > basis.shape[1]:
                basis = trial
            else:
                bad.append(name)
        return bad


@dataclass
class _InnerResult:
    params: np.ndarray
    value: float
    grad: np.ndarray
    H: np.ndarray
    trace: list[float]
    iterations: int
    converged: bool


def _newton(prob: _Problem, theta: float, start: np.ndarray, control: FitControl) -> _InnerResult:
    params = start.astype(float).copy()
    value, grad, H = prob.derivatives(params, theta)
    trace = [value]
    for it in range(control.max_inner + 1):
        if np.max(np.abs(grad), initial=0.0) < control.tol:
            return _InnerResult(params, value, grad, H, trace, it, True)
        if it == control.max_inner:
            break
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SingularHessianError(prob.collinear_columns()) from None
        if not np.all(np.isfinite(step)):
            raise SingularHessianError(prob.collinear_columns())
        gnorm = np.max(np.abs(grad))
        noise = 1e-12 * max(1.0, abs(value))
        for _ in range(40):
            trial = params + step
            new_value = prob.value(trial, theta)
            if new_value >= value:
                new = prob.derivatives(trial, theta)
                break
            if new_value >= value - noise:
                # drop below the objective's resolution: judge by the gradient
                new = prob.derivatives(trial, theta)
                if np.max(np.abs(new[1])) < gnorm:
                    break
            step = step / 2
        else:
            # no ascent possible at working precision
            return _InnerResult(params, value, grad, H, trace, it,
                                bool(np.max(np.abs(grad)) < control.tol))
        params = trial
        value, grad, H = new
        trace.append(value)
    return _InnerResult(params, value, grad, H, trace, control.max_inner, False)


def _stderr(prob: _Problem, H: np.ndarray) -> np.ndarray:
    if prob.p == 0:
        return np.empty(0)
    try:
        cov = linalg.inv(H)
    except linalg.LinAlgError:
        raise SingularHessianError(prob.collinear_columns()) from None
    return np.sqrt(np.clip(np.diag(cov)[:prob.p], 0, None))


def fit_ppl(dataset: SurvivalDataset, spec: ModelSpec,
            control: FitControl | None = None) -> FrailtyFit:
    """Fit a Cox model, optionally with shared gamma frailty, by penalized partial likelihood.

    Parameters
    ----------
    dataset : SurvivalDataset
    spec : ModelSpec
        Covariate selection and whether clusters get a gamma frailty.
    control : FitControl, optional
        Tolerances, iteration limits and the ``theta`` search bracket.

    Returns
    -------
    FrailtyFit
        ``converged`` is False when an iteration limit was hit; the traces are
        kept so the failure can be inspected.

    Raises
    ------
    SingularHessianError
        If the Newton system is singular, naming the collinear covariates.
    """
    control = control or FitControl()
    if spec.frailty and dataset.n_clusters < 2:
        raise DataError("a frailty model needs at least two clusters")
    prob = _Problem(dataset, spec)
    if prob.p and prob.collinear_columns():
        raise SingularHessianError(prob.collinear_columns())

    if not spec.frailty:
        res = _newton(prob, 0.0, np.zeros(prob.dim), control)
        beta = res.params
        u = np.zeros(dataset.n_clusters)
        baseline = _breslow(prob.rs, prob.eta(res.params))
        ml = marginal_loglik(beta, baseline, dataset, spec, 0.0)
        return FrailtyFit(
            spec, beta, u, 0.0, baseline, _stderr(prob, res.H), res.converged,
            res.iterations, 0, res.trace, [], ml, -2 * ml + 2 * prob.p,
            dataset.cluster_labels, dataset.covariate_names,
            message="" if res.converged else "inner Newton iterations exhausted",
        )

    state = {"params": np.zeros(prob.dim), "inner": 0, "ok": True}
    outer_trace: list[tuple[float, float]] = []

    def profile(log_theta: float) -> float:
        theta = math.exp(log_theta)
        res = _newton(prob, theta, state["params"], control)
        state["inner"] += res.iterations
        state["ok"] &= res.converged
        if res.converged:
            state["params"] = res.params
        beta, u = prob.split(res.params)
        baseline = _breslow(prob.rs, prob.eta(res.params))
        ml = marginal_loglik(beta, baseline, dataset, spec, theta)
        outer_trace.append((theta, ml))
        return -ml

    # the starting point is also evaluated so the warm start begins at theta_init
    profile(math.log(control.theta_init))

    lo, hi = (math.log(b) for b in control.theta_bracket)
    outer_ok = True
    n_outer = 0
    for attempt in range(2):
        opt = optimize.minimize_scalar(profile, bounds=(lo, hi), method="bounded",
                                       options={"xatol": control.outer_tol,
                                                "maxiter": control.max_outer})
        n_outer += int(opt.nfev)
        outer_ok = bool(opt.success)
        if attempt == 0 and hi - opt.x < 1e-3:
            # maximum on the upper edge: widen once
            lo, hi = hi - 1e-3, hi + math.log(100.0)
        else:
            break
    log_theta = float(opt.x)
    theta = math.exp(log_theta)
    no_frailty = log_theta - math.log(control.theta_bracket[0]) < 1e-3
    message = "theta at the lower search bound: no evidence of frailty" if no_frailty else ""

    final = _newton(prob, theta, np.zeros(prob.dim), control)
    converged = final.converged and outer_ok and state["ok"]
    if not final.converged:
        message = "inner Newton iterations exhausted"
    elif not outer_ok:
        message = "outer theta search did not converge"
    beta, u = prob.split(final.params)
    baseline = _breslow(prob.rs, prob.eta(final.params))
    ml = marginal_loglik(beta, baseline, dataset, spec, theta)
    return FrailtyFit(
        spec, beta.copy(), u.copy(), theta, baseline, _stderr(prob, final.H), converged,
        state["inner"] + final.iterations, n_outer, final.trace, outer_trace, ml,
        -2 * ml + 2 * (prob.p + 1), dataset.cluster_labels, dataset.covariate_names,
        no_frailty_evidence=bool(no_frailty), message=message,
    )


def ppl_gradient(beta, u, theta: float, dataset: SurvivalDataset, spec: ModelSpec) -> np.ndarray:
    """Analytic gradient of the penalized partial log-likelihood in ``(beta, u)``."""
    prob = _Problem(dataset, spec)
    params = np.concatenate([np.asarray(beta, float), np.asarray(u, float)]) if spec.frailty \
        else np.asarray(beta, float)
    return prob.derivatives(params, theta)[1]


def ppl_value(beta, u, theta: float, dataset: SurvivalDataset, spec: ModelSpec) -> float:
    val = partial_loglik(beta, u, dataset, spec)
    if spec.frailty:
        val += penalty_loglik(u, theta)
    return val
