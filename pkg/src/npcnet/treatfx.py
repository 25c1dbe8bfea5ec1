"""Per-phenotype logistic models of in-hospital death on treatment exposures,
Wald tests, odds ratios and E-values."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .cohort import Episode

Z_975 = float(stats.norm.ppf(0.975))
TREATMENT_TERMS = ("iv_fluid_volume", "time_to_vasopressor")
DEFAULT_ADJUSTERS = ("age", "gender", "sofa6")
MAX_HALVINGS = 30
SEPARATION_COEF = 15.0


class RankDeficientError(ValueError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear column(s): {', '.join(self.columns)}")


class NonEstimableError(ValueError):
    pass


@dataclass
class LogisticFit:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    separation: bool = False
    diagnostic: str = ""
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p(self) -> np.ndarray:
        return 2.0 * stats.norm.sf(np.abs(self.z))

    @property
    def odds_ratio(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.coef)

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        """95% Wald interval on the odds-ratio scale."""
        with np.errstate(over="ignore"):
            return np.exp(self.coef - Z_975 * self.se), np.exp(self.coef + Z_975 * self.se)

    def term(self, name: str) -> dict:
        i = self.names.index(name)
        lo, hi = self.ci
        return {
            "coef": float(self.coef[i]),
            "se": float(self.se[i]),
            "z": float(self.z[i]),
            "p": float(self.p[i]),
            "or": float(self.odds_ratio[i]),
            "ci_low": float(lo[i]),
            "ci_high": float(hi[i]),
        }


def collinear_columns(X: np.ndarray, names: Sequence[str], rtol: float = 1e-10) -> list[str]:
    """Columns that add nothing to the span of the columns before them."""
    bad, kept = [], []
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if trial.shape[1] > trial.shape[0] or s[-1] <= rtol * max(s[0], 1.0) * max(trial.shape):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def _loglik(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    X,
    y,
    names: Sequence[str] | None = None,
    max_iter: int = 100,
    tol: float = 1e-8,
    add_intercept: bool = True,
) -> LogisticFit:
    """Newton/IRLS fit with step-halving so the log-likelihood never decreases.

    Stops when the score vector's Euclidean norm drops below ``tol``.  The
    covariance is the inverse Fisher information at the estimate.  Perfect or
    quasi-complete separation is reported through ``separation`` and
    ``converged = False`` rather than raised.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("design matrix and outcome lengths differ")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("outcomes must be 0/1")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("need one name per design column")
    if add_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
        names = ["intercept", *names]
    if X.shape[0] == 0:
        raise NonEstimableError("no observations")
    if y.min() == y.max():
        raise NonEstimableError(f"outcome is constant ({int(y[0])}) so no coefficient is estimable")
    bad = collinear_columns(X, names)
    if bad:
        raise RankDeficientError(bad)

    beta = np.zeros(X.shape[1])
    ll = _loglik(X, y, beta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
        score = X.T @ (y - mu)
        if np.linalg.norm(score) < tol:
            converged = True
            it -= 1
            break
        info = X.T @ (X * (mu * (1.0 - mu))[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + t * step
            ll_new = _loglik(X, y, cand)
            # allow rounding noise once the optimum is reached
            if ll_new >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            break  # no ascent direction left at machine precision
        beta, ll = cand, ll_new
        trace.append(ll)

    mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
    if not converged and np.linalg.norm(X.T @ (y - mu)) < tol:
        converged = True
    w = mu * (1.0 - mu)
    separation = bool(np.max(np.abs(beta)) > SEPARATION_COEF and np.min(w) < 1e-10)
    info = X.T @ (X * w[:, None])
    if separation:
        cov = np.linalg.pinv(info)
    else:
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            raise NonEstimableError("information matrix is singular at the estimate") from None
    cov = 0.5 * (cov + cov.T)
    diagnostic = ""
    if separation:
        converged = False
        grows = [names[j] for j in np.flatnonzero(np.abs(beta) > SEPARATION_COEF)]
        diagnostic = f"separation: fitted probabilities reach 0/1 and coefficient(s) diverge: {', '.join(grows)}"
    elif not converged:
        diagnostic = f"no convergence after {it} iteration(s)"
    return LogisticFit(names, beta, cov, converged, it, ll, separation, diagnostic, trace)


# per-phenotype treatment models -------------------------------------------------------


@dataclass
class TreatmentFit:
    phenotype: str
    n: int
    n_deaths: int
    terms: list[str]
    fit: LogisticFit | None
    low_power: bool
    non_estimable: str | None = None
    dropped_missing: int = 0

    @property
    def estimable(self) -> bool:
        return self.fit is not None and self.non_estimable is None


def _adjuster_value(e: Episode, name: str) -> float | None:
    if name == "sofa6":
        s = e.sofa_at(6)
        return None if s is None else float(s)
    v = e.treatment.adjusters.get(name)
    return None if v is None else float(v)


def treatment_design(
    episodes: Sequence[Episode], adjusters: Sequence[str] = DEFAULT_ADJUSTERS
) -> tuple[np.ndarray, np.ndarray, list[str], int]:
    """Design rows ``[fluid (L), time to vasopressor (h), adjusters...]`` and death
    flags for treated episodes with every adjuster present."""
    names = [*TREATMENT_TERMS, *adjusters]
    rows, ys, dropped = [], [], 0
    for e in episodes:
        t = e.treatment
        if t is None:
            continue
        adj = [_adjuster_value(e, a) for a in adjusters]
        if any(v is None for v in adj):
            dropped += 1
            continue
        rows.append([t.iv_fluid_volume_liters, t.time_to_vasopressor_hours, *adj])
        ys.append(float(t.in_hospital_death))
    X = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    return X, np.asarray(ys), names, dropped


def treatment_model(
    phenotype_episodes: Sequence[Episode],
    phenotype: str = "",
    adjusters: Sequence[str] = DEFAULT_ADJUSTERS,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> TreatmentFit:
    """Fit in-hospital death on fluids, vasopressor timing and adjusters.

    Odds ratios are per litre and per hour.  Fewer than ten episodes per
    covariate sets ``low_power``; a fit that cannot be made is returned with
    ``non_estimable`` explaining why instead of raising.
    """
    X, y, names, dropped = treatment_design(phenotype_episodes, adjusters)
    n = len(y)
    low_power = n < 10 * len(names)
    base = dict(phenotype=phenotype, n=n, n_deaths=int(y.sum()), terms=names, low_power=low_power, dropped_missing=dropped)
    if n == 0:
        return TreatmentFit(fit=None, non_estimable="no treated episodes", **base)
    try:
        fit = fit_logistic(X, y, names, max_iter=max_iter, tol=tol)
    except (NonEstimableError, RankDeficientError) as exc:
        return TreatmentFit(fit=None, non_estimable=str(exc), **base)
    reason = fit.diagnostic if fit.separation else None
    return TreatmentFit(fit=fit, non_estimable=reason, **base)


# sensitivity analysis -----------------------------------------------------------------


@dataclass(frozen=True)
class EValueResult:
    e_value_point: float
    e_value_ci_limit: float
    odds_ratio: float
    ci_bound: float | None


def _e_from_rr(rr: float) -> float:
    if rr < 1.0:
        rr = 1.0 / rr
    return rr + math.sqrt(rr * (rr - 1.0))


def e_value_from_or(odds_ratio: float) -> float:
    """E-value after the square-root odds-ratio to risk-ratio conversion."""
    if not odds_ratio > 0:
        raise ValueError(f"odds ratio must be positive, got {odds_ratio}")
    return _e_from_rr(math.sqrt(odds_ratio))


def e_value(or_point: float, or_ci_lower: float | None = None, or_ci_upper: float | None = None) -> EValueResult:
    """Point E-value and the E-value of the CI bound nearer the null.

    The CI limit is 1 when the interval contains 1, and equals the point value
    when no interval is given.
    """
    point = e_value_from_or(or_point)
    if or_ci_lower is None and or_ci_upper is None:
        return EValueResult(point, point, float(or_point), None)
    if or_ci_lower is None or or_ci_upper is None:
        raise ValueError("give both CI bounds or neither")
    if not 0 < or_ci_lower <= or_point <= or_ci_upper:
        raise ValueError(f"need 0 < lower <= OR <= upper, got {or_ci_lower}, {or_point}, {or_ci_upper}")
    if or_ci_lower <= 1.0 <= or_ci_upper:
        return EValueResult(point, 1.0, float(or_point), 1.0)
    bound = or_ci_lower if or_point > 1.0 else or_ci_upper
    return EValueResult(point, e_value_from_or(bound), float(or_point), float(bound))


# reporting ----------------------------------------------------------------------------

FOREST_COLUMNS = [
    "phenotype", "term", "n", "or", "ci_low", "ci_high", "p", "e_value", "e_value_ci_limit", "low_power", "estimable", "note",
]


def forest_rows(fits: Sequence[TreatmentFit], terms: Sequence[str] = TREATMENT_TERMS) -> list[dict]:
    rows = []
    for tf in fits:
        for term in terms:
            row = dict.fromkeys(FOREST_COLUMNS, "")
            row.update(phenotype=tf.phenotype, term=term, n=tf.n, low_power=int(tf.low_power), estimable=int(tf.estimable))
            if tf.estimable:
                t = tf.fit.term(term)
                ev = e_value(t["or"], t["ci_low"], t["ci_high"])
                row.update(
                    {k: repr(t[k]) for k in ("or", "ci_low", "ci_high", "p")},
                    e_value=repr(ev.e_value_point),
                    e_value_ci_limit=repr(ev.e_value_ci_limit),
                )
            else:
                row["note"] = tf.non_estimable or ""
            rows.append(row)
    return rows


def forest_csv(fits: Sequence[TreatmentFit], terms: Sequence[str] = TREATMENT_TERMS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, FOREST_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(forest_rows(fits, terms))
    return buf.getvalue()


def fits_by_phenotype(
    episodes: Sequence[Episode],
    labels: Sequence[str],
    phenotypes: Sequence[str],
    adjusters: Sequence[str] = DEFAULT_ADJUSTERS,
) -> list[TreatmentFit]:
    """One ``treatment_model`` per phenotype name, including phenotypes with no episodes."""
    by: Mapping[str, list[Episode]] = {p: [] for p in phenotypes}
    for e, lab in zip(episodes, labels):
        by.setdefault(lab, []).append(e)
    return [treatment_model(by[p], p, adjusters) for p in phenotypes]
