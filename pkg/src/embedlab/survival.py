"""Kaplan-Meier, log-rank, Cox proportional hazards and horizon ROC."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_vector
from .exceptions import (
    DataError,
    DegenerateCovariate,
    DegenerateHorizon,
    DegenerateTest,
    FormatError,
    NonConvergenceWarning,
    ShapeError,
)


def _check_times(time, event):
    time = check_vector(time, name="time")
    event = np.asarray(event).ravel().astype(bool)
    if event.shape != time.shape:
        raise ShapeError("time and event differ in length")
    if time.size == 0:
        raise DataError("no records")
    if np.any(time <= 0):
        raise DataError("survival times must be positive")
    return time, event


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the 1-df chi-square distribution."""
    return float(gammaincc(0.5, x / 2.0)) if x > 0 else 1.0


@dataclass(frozen=True)
class SurvivalRecords:
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray  # (n, p), possibly p == 0
    covariate_names: tuple[str, ...] = ()
    risk: np.ndarray | None = None
    group: np.ndarray | None = None
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        t, e = _check_times(self.time, self.event)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e)
        cov = np.asarray(self.covariates, dtype=np.float64).reshape(t.size, -1)
        if not np.all(np.isfinite(cov)):
            raise DataError("covariates must be finite")
        object.__setattr__(self, "covariates", cov)

    def __len__(self):
        return self.time.size

    def subset(self, mask) -> SurvivalRecords:
        mask = np.asarray(mask)
        return SurvivalRecords(
            self.time[mask],
            self.event[mask],
            self.covariates[mask],
            self.covariate_names,
            None if self.risk is None else self.risk[mask],
            None if self.group is None else self.group[mask],
            tuple(np.asarray(self.ids, dtype=object)[mask]) if self.ids else (),
        )


def load_records(path) -> SurvivalRecords:
    """Read ``id,time,event,risk,cov_*,group`` CSV (risk, cov_* and group optional)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for req in ("id", "time", "event"):
            if req not in cols:
                raise FormatError(f"{path}: missing column {req!r}")
        cov_cols = [c for c in cols if c.startswith("cov_")]
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: no records")
    try:
        time = np.array([float(r["time"]) for r in rows])
        event = np.array([int(float(r["event"])) for r in rows])
        cov = np.array([[float(r[c]) for c in cov_cols] for r in rows]).reshape(len(rows), len(cov_cols))
        risk = np.array([float(r["risk"]) for r in rows]) if "risk" in cols else None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.isin(event, (0, 1)).all():
        raise FormatError(f"{path}: event must be 0 or 1")
    group = np.array([r["group"] for r in rows]) if "group" in cols else None
    return SurvivalRecords(
        time, event, cov, tuple(c[4:] for c in cov_cols), risk, group, tuple(r["id"] for r in rows)
    )


# --------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KaplanMeier:
    """Product-limit estimate evaluated at every distinct observed time."""

    times: np.ndarray
    survival: np.ndarray
    variance: np.ndarray  # Greenwood
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        """Right-continuous step function; ``S(t) = 1`` before the first time."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right") - 1
        s = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return s if s.ndim else float(s)

    def left_limit(self, t):
        """``S(t-)``, the survival just before ``t``."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="left") - 1
        s = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        return s if s.ndim else float(s)

    def confidence_band(self, z=1.96):
        se = np.sqrt(self.variance)
        return np.clip(self.survival - z * se, 0, 1), np.clip(self.survival + z * se, 0, 1)


def kaplan_meier(time, event) -> KaplanMeier:
    time, event = _check_times(time, event)
    uniq, inv = np.unique(time, return_inverse=True)
    d = np.bincount(inv, weights=event.astype(np.float64), minlength=uniq.size)
    leaving = np.bincount(inv, minlength=uniq.size)
    n_risk = time.size - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    factor = 1.0 - d / n_risk
    surv = np.cumprod(factor)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n_risk > d, d / (n_risk * (n_risk - d)), 0.0)
    var = surv**2 * np.cumsum(terms)
    return KaplanMeier(uniq, surv, var, n_risk.astype(np.int64), d.astype(np.int64))


# --------------------------------------------------------------------------
# Log-rank


def log_rank(time_a, event_a, time_b, event_b):
    """Two-group log-rank test; returns ``(chi2, p)`` with 1 df."""
    ta, ea = _check_times(time_a, event_a)
    tb, eb = _check_times(time_b, event_b)
    time = np.concatenate([ta, tb])
    event = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    if not event.any():
        raise DegenerateTest("log-rank test needs at least one event")
    uniq, inv = np.unique(time, return_inverse=True)
    k = uniq.size
    d = np.bincount(inv, weights=event.astype(float), minlength=k)
    d_a = np.bincount(inv, weights=(event & in_a).astype(float), minlength=k)
    leave = np.bincount(inv, minlength=k)
    leave_a = np.bincount(inv, weights=in_a.astype(float), minlength=k)
    n = time.size - np.concatenate([[0], np.cumsum(leave)[:-1]])
    n_a = ta.size - np.concatenate([[0], np.cumsum(leave_a)[:-1]])
    rows = d > 0
    d, d_a, n, n_a = d[rows], d_a[rows], n[rows].astype(float), n_a[rows]
    expected = d * n_a / n
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    num = float(np.sum(d_a - expected))
    V = float(np.sum(var))
    if num == 0.0:
        return 0.0, 1.0
    if V <= 0:
        raise DegenerateTest("log-rank variance is zero")
    chi2 = num * num / V
    return chi2, chi2_sf_1df(chi2)


# --------------------------------------------------------------------------
# Cox proportional hazards


def _risk_set_sums(order_desc, last_of_time, eta, X):
    """Cumulative risk-set sums ordered by descending time.

    Returns ``S0, S1, S2`` evaluated per distinct time (rows of
    ``last_of_time``): sums of ``exp(eta)``, ``exp(eta) x`` and
    ``exp(eta) x x^T`` over subjects with time >= that time.
    """
    w = np.exp(eta[order_desc])
    Xs = X[order_desc]
    S0 = np.cumsum(w)[last_of_time]
    S1 = np.cumsum(w[:, None] * Xs, axis=0)[last_of_time]
    S2 = np.cumsum(w[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)[last_of_time]
    return S0, S1, S2


class _CoxProblem:
    def __init__(self, time, event, X, ties):
        self.X = X
        self.ties = ties
        order = np.argsort(-time, kind="stable")
        self.order = order
        t_sorted = time[order]
        # last position (in descending order) of each distinct time
        change = np.flatnonzero(np.diff(t_sorted) != 0)
        self.last = np.concatenate([change, [t_sorted.size - 1]])
        self.group_of = np.empty(time.size, dtype=np.int64)
        first = np.concatenate([[0], change + 1])
        for g, (s, e) in enumerate(zip(first, self.last)):
            self.group_of[order[s : e + 1]] = g
        self.n_groups = self.last.size
        ev = event.astype(bool)
        self.event_idx = np.flatnonzero(ev)
        self.d = np.bincount(self.group_of[ev], minlength=self.n_groups)
        self.sum_x_events = np.zeros((self.n_groups, X.shape[1]))
        np.add.at(self.sum_x_events, self.group_of[ev], X[ev])

    def evaluate(self, beta):
        """Log partial likelihood, score and Hessian."""
        X = self.X
        eta = X @ beta
        S0, S1, S2 = _risk_set_sums(self.order, self.last, eta, X)
        has = self.d > 0
        ll = float(eta[self.event_idx].sum())
        grad = self.sum_x_events[has].sum(axis=0)
        hess = np.zeros((X.shape[1], X.shape[1]))
        if self.ties == "breslow":
            d = self.d[has].astype(float)
            s0, s1, s2 = S0[has], S1[has], S2[has]
            ll -= float(np.sum(d * np.log(s0)))
            mean = s1 / s0[:, None]
            grad -= np.sum(d[:, None] * mean, axis=0)
            hess -= np.sum(
                d[:, None, None] * (s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]),
                axis=0,
            )
            return ll, grad, hess
        # Efron: the tied events' own mass is removed fractionally
        w = np.exp(eta)
        ev = self.event_idx
        g_ev = self.group_of[ev]
        n_g = self.n_groups
        D0 = np.bincount(g_ev, weights=w[ev], minlength=n_g)
        D1 = np.zeros((n_g, X.shape[1]))
        np.add.at(D1, g_ev, w[ev, None] * X[ev])
        D2 = np.zeros((n_g, X.shape[1], X.shape[1]))
        np.add.at(D2, g_ev, w[ev, None, None] * X[ev, :, None] * X[ev, None, :])
        for g in np.flatnonzero(has):
            dg = int(self.d[g])
            for l in range(dg):
                frac = l / dg
                s0 = S0[g] - frac * D0[g]
                s1 = S1[g] - frac * D1[g]
                s2 = S2[g] - frac * D2[g]
                ll -= math.log(s0)
                mean = s1 / s0
                grad -= mean
                hess -= s2 / s0 - np.outer(mean, mean)
        return ll, grad, hess


@dataclass(frozen=True)
class CoxResult:
    coef: np.ndarray
    standard_errors: np.ndarray
    hazard_ratios: np.ndarray
    ci_lower: np.ndarray  # on the hazard-ratio scale
    ci_upper: np.ndarray
    log_likelihood: float
    log_likelihood_history: tuple[float, ...]
    n_iter: int
    converged: bool
    covariate_names: tuple[str, ...] = ()

    def to_dict(self):
        names = self.covariate_names or tuple(f"x{i}" for i in range(self.coef.size))
        return {
            "covariates": {
                n: {
                    "coef": float(b),
                    "se": float(s),
                    "hr": float(h),
                    "hr_ci_lo": float(lo),
                    "hr_ci_hi": float(hi),
                }
                for n, b, s, h, lo, hi in zip(
                    names, self.coef, self.standard_errors, self.hazard_ratios, self.ci_lower, self.ci_upper
                )
            },
            "log_likelihood": self.log_likelihood,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


def cox_fit(X, time, event, ties="breslow", max_iter=50, tol=1e-8, z=1.96, covariate_names=()):
    """Newton-Raphson maximization of the Cox partial likelihood.

    Steps that lower the log partial likelihood are halved (up to 30 times).
    Convergence is declared when the score norm drops below ``tol`` or the
    Newton step becomes negligible relative to ``beta``. If the
    likelihood keeps improving without converging, or a coefficient
    runs off to a per-SD hazard ratio above ``e^10`` (perfect
    separation), a :class:`NonConvergenceWarning` is issued and
    ``converged`` is False.
    """
    if ties not in ("breslow", "efron"):
        raise ValueError(f"ties must be 'breslow' or 'efron', got {ties!r}")
    time, event = _check_times(time, event)
    X = check_matrix(X, name="covariates")
    if X.shape[0] != time.size:
        raise ShapeError("covariates and times differ in length")
    if not event.any():
        raise DegenerateTest("Cox regression needs at least one event")
    const = np.flatnonzero(np.ptp(X, axis=0) == 0)
    if const.size:
        raise DegenerateCovariate(f"covariate column(s) {const.tolist()} are constant")
    mu = X.mean(axis=0)
    prob = _CoxProblem(time, event, X - mu, ties)
    beta = np.zeros(X.shape[1])
    ll, grad, hess = prob.evaluate(beta)
    history = [ll]
    converged = bool(np.linalg.norm(grad) < tol)
    n_iter = 0
    while not converged and n_iter < max_iter:
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            break
        for _ in range(30):
            cand = beta + step
            ll_new, g_new, h_new = prob.evaluate(cand)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            step = step / 2
        else:
            break
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        history.append(ll)
        n_iter += 1
        # the score has a rounding floor that grows with n; a negligible
        # Newton step means that floor has been reached
        tiny_step = np.max(np.abs(step)) < 1e-10 * (1.0 + np.max(np.abs(beta)))
        converged = bool(np.linalg.norm(grad) < tol or tiny_step)
    # a monotone likelihood drives the score to zero as beta runs off;
    # a per-SD hazard ratio above e^10 is taken as that divergence
    if converged and np.any(np.abs(beta) * X.std(axis=0) > 10.0):
        converged = False
    if not converged:
        warnings.warn(
            f"Cox fit did not converge after {n_iter} iterations (score norm {np.linalg.norm(grad):.3g}); "
            "the likelihood may be monotone",
            NonConvergenceWarning,
            stacklevel=2,
        )
    try:
        cov = np.linalg.inv(-hess)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(beta.size, np.inf)
    with np.errstate(over="ignore"):
        hr = np.exp(beta)
        lo, hi = np.exp(beta - z * se), np.exp(beta + z * se)
    return CoxResult(
        coef=beta,
        standard_errors=se,
        hazard_ratios=hr,
        ci_lower=lo,
        ci_upper=hi,
        log_likelihood=float(ll),
        log_likelihood_history=tuple(history),
        n_iter=int(n_iter),
        converged=bool(converged),
        covariate_names=tuple(covariate_names),
    )


def cox_partial_likelihood(X, time, event, beta, ties="breslow"):
    """``(log_likelihood, score, hessian)`` at ``beta`` (no centering)."""
    time, event = _check_times(time, event)
    X = check_matrix(X, name="covariates")
    return _CoxProblem(time, event, X, ties).evaluate(np.asarray(beta, dtype=np.float64))


class CoxPH(BaseEstimator):
    """Cox proportional hazards regression.

    ``fit(X, time, event)``; after fitting, ``coef_``, ``hazard_ratios_``,
    ``standard_errors_`` and ``result_`` are available, and ``predict``
    returns the linear risk score ``X @ coef_``.
    """

    def __init__(self, ties="breslow", max_iter=50, tol=1e-8):
        self.ties = ties
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, time, event):
        self.result_ = cox_fit(X, time, event, self.ties, self.max_iter, self.tol)
        self.coef_ = self.result_.coef
        self.hazard_ratios_ = self.result_.hazard_ratios
        self.standard_errors_ = self.result_.standard_errors
        self.n_features_in_ = self.coef_.size
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return check_matrix(X, dim=self.n_features_in_) @ self.coef_

    def score(self, X, time, event):
        """Concordance is out of scope; returns the log partial likelihood."""
        check_is_fitted(self, "result_")
        return cox_partial_likelihood(X, time, event, self.coef_, self.ties)[0]


# --------------------------------------------------------------------------
# Time-dependent ROC


def time_dependent_auc(time, event, risk, horizon, ipcw=True) -> float:
    """Cumulative-case / dynamic-control AUC at ``horizon``.

    Cases have an observed event at or before the horizon, controls are
    still event-free after it. Cases are weighted by ``1 / G(T_i-)``, with
    ``G`` the Kaplan-Meier estimate of the censoring distribution; control
    weights are constant and cancel. Higher risk means earlier events.
    With ``ipcw=False`` all weights are 1.
    """
    time, event = _check_times(time, event)
    risk = check_vector(risk, n=time.size, name="risk")
    cases = event & (time <= horizon)
    controls = time > horizon
    if not cases.any() or not controls.any():
        raise DegenerateHorizon(f"horizon {horizon}: {int(cases.sum())} cases, {int(controls.sum())} controls")
    if ipcw:
        G = kaplan_meier(time, ~event)
        g = G.left_limit(time[cases])
        if np.any(g <= 0):
            raise DegenerateHorizon("censoring survival reaches zero before a case time")
        w = 1.0 / g
    else:
        w = np.ones(int(cases.sum()))
    ctrl = np.sort(risk[controls])
    r_case = risk[cases]
    below = np.searchsorted(ctrl, r_case, side="left")
    ties = np.searchsorted(ctrl, r_case, side="right") - below
    concordant = below + 0.5 * ties
    return float(np.sum(w * concordant) / (np.sum(w) * ctrl.size))


def median_split(risk, threshold=None):
    """Boolean "high risk" mask: ``risk > threshold`` (default the median)."""
    risk = check_vector(risk, name="risk")
    thr = float(np.median(risk)) if threshold is None else float(threshold)
    return risk > thr, thr
