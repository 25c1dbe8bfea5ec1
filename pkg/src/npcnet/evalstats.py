"""Internal clustering metrics, SOFA-stratified trajectory tests, the trajectory
divergence index, Kaplan–Meier curves and per-phenotype characteristics."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .cohort import Episode

SOFA_STRATA: tuple[tuple[int, int], ...] = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 24))
TRAJECTORY_HOURS: tuple[int, ...] = tuple(range(7, 25))
MIN_GROUP = 3
SKEW_THRESHOLD = 1.0


@dataclass(frozen=True)
class Undefined:
    """Marker for a statistic that has no value on the given input."""

    reason: str

    def __bool__(self) -> bool:
        return False


def is_defined(value) -> bool:
    return not isinstance(value, Undefined)


def _as_float_or_none(value):
    return float(value) if is_defined(value) else None


# internal clustering metrics ---------------------------------------------------------


def _prepare(E, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    E = np.asarray(E, dtype=float)
    labels = np.asarray(labels)
    if E.ndim != 2 or E.shape[0] != labels.shape[0]:
        raise ValueError("need an (n, d) embedding matrix and one label per row")
    uniq, codes = np.unique(labels, return_inverse=True)
    return E, codes, uniq


def _pairwise_distances(E: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", E, E)
    d2 = sq[:, None] + sq[None, :] - 2.0 * E @ E.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def silhouette(E, labels) -> float | Undefined:
    """Mean silhouette width; points in singleton clusters score 0."""
    E, codes, uniq = _prepare(E, labels)
    k, n = len(uniq), len(codes)
    if k < 2 or k >= n:
        return Undefined(f"silhouette needs 2 <= k < n clusters, got k={k}, n={n}")
    sizes = np.bincount(codes, minlength=k)
    if np.all(sizes == 1):
        return Undefined("every cluster is a singleton")
    D = _pairwise_distances(E)
    sums = np.stack([D[:, codes == j].sum(axis=1) for j in range(k)], axis=1)
    own = sizes[codes]
    a = sums[np.arange(n), codes] / np.maximum(own - 1, 1)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), codes] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def calinski_harabasz(E, labels) -> float | Undefined:
    """Between/within dispersion ratio; ``inf`` when clusters have zero spread."""
    E, codes, uniq = _prepare(E, labels)
    k, n = len(uniq), len(codes)
    if k < 2 or k >= n:
        return Undefined(f"Calinski-Harabasz needs 2 <= k < n clusters, got k={k}, n={n}")
    centre = E.mean(axis=0)
    between = within = 0.0
    for j in range(k):
        members = E[codes == j]
        c = members.mean(axis=0)
        between += len(members) * float(((c - centre) ** 2).sum())
        within += float(((members - c) ** 2).sum())
    if within == 0.0:
        return math.inf if between > 0 else Undefined("all points coincide")
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(E, labels) -> float | Undefined:
    """Mean over clusters of the worst ``(s_i + s_j) / d(c_i, c_j)``, with ``s`` the
    mean distance of members to their centroid."""
    E, codes, uniq = _prepare(E, labels)
    k = len(uniq)
    if k < 2:
        return Undefined(f"Davies-Bouldin needs at least 2 clusters, got {k}")
    cents = np.stack([E[codes == j].mean(axis=0) for j in range(k)])
    spread = np.array([np.linalg.norm(E[codes == j] - cents[j], axis=1).mean() for j in range(k)])
    sep = _pairwise_distances(cents)
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0.0):
        return Undefined("two cluster centroids coincide")
    ratio = np.where(off, (spread[:, None] + spread[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def _mean_sd(values: Sequence[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


@dataclass
class MetricReport:
    """SI, CHI and DBI per seed with mean (SD) across seeds.

    Undefined per-seed values are stored as ``None`` and left out of the summary.
    """

    si: list[float | None] = field(default_factory=list)
    chi: list[float | None] = field(default_factory=list)
    dbi: list[float | None] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    def add(self, seed: int, E, labels) -> None:
        self.seeds.append(int(seed))
        self.si.append(_as_float_or_none(silhouette(E, labels)))
        self.chi.append(_as_float_or_none(calinski_harabasz(E, labels)))
        self.dbi.append(_as_float_or_none(davies_bouldin(E, labels)))

    def summary(self) -> dict[str, dict[str, float | None]]:
        out = {}
        for name in ("si", "chi", "dbi"):
            mean, sd = _mean_sd(getattr(self, name))
            out[name] = {"mean": mean, "sd": sd}
        return out

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "per_seed": {"si": list(self.si), "chi": list(self.chi), "dbi": list(self.dbi)},
            "summary": self.summary(),
        }


def metric_report(E, labels, seed: int = 0) -> MetricReport:
    report = MetricReport()
    report.add(seed, E, labels)
    return report


# SOFA stratification and trajectory tests ---------------------------------------------


def stratum_of(score: int) -> tuple[int, int]:
    for lo, hi in SOFA_STRATA:
        if lo <= score <= hi:
            return (lo, hi)
    raise ValueError(f"SOFA score {score} outside 0..24")


def stratify_by_sofa6(episodes: Sequence[Episode]) -> tuple[dict[tuple[int, int], list[int]], int]:
    """Indices of episodes per hour-6 SOFA stratum plus the count excluded for a
    missing hour-6 score."""
    strata: dict[tuple[int, int], list[int]] = {s: [] for s in SOFA_STRATA}
    missing = 0
    for i, e in enumerate(episodes):
        s6 = e.sofa_at(6)
        if s6 is None:
            missing += 1
            continue
        strata[stratum_of(s6)].append(i)
    return strata, missing


@dataclass(frozen=True)
class PairTest:
    u: float | None
    p: float | None
    n_a: int
    n_b: int

    @property
    def testable(self) -> bool:
        return self.p is not None


def mann_whitney(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann–Whitney test; returns ``(U_x, p)`` where ``U_x`` counts pairs
    with ``x > y`` plus half the ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.all(x == x[0]) and np.all(y == x[0]):
        return len(x) * len(y) / 2.0, 1.0
    res = stats.mannwhitneyu(x, y, alternative="two-sided")
    return float(res.statistic), float(res.pvalue)


def pairwise_trajectory_test(
    stratum_episodes: Sequence[Episode],
    labels: Sequence,
    hour: int,
    min_group: int = MIN_GROUP,
) -> dict[tuple, PairTest]:
    """Mann–Whitney test of hour-``hour`` SOFA for every pair of phenotypes present.

    Episodes without a score at ``hour`` are left out of that cell.  Pairs where
    either side has fewer than ``min_group`` scores are returned untestable.
    Keys are sorted label pairs.
    """
    if not TRAJECTORY_HOURS[0] <= hour <= TRAJECTORY_HOURS[-1]:
        raise ValueError(f"hour must lie in [{TRAJECTORY_HOURS[0]}, {TRAJECTORY_HOURS[-1]}], got {hour}")
    groups: dict = {}
    for e, lab in zip(stratum_episodes, labels):
        s = e.sofa_at(hour)
        if s is not None:
            groups.setdefault(lab, []).append(s)
    present = sorted(set(labels))
    out = {}
    for a, b in combinations(present, 2):
        xa, xb = groups.get(a, []), groups.get(b, [])
        if len(xa) < min_group or len(xb) < min_group:
            out[(a, b)] = PairTest(None, None, len(xa), len(xb))
        else:
            u, p = mann_whitney(xa, xb)
            out[(a, b)] = PairTest(u, p, len(xa), len(xb))
    return out


@dataclass(frozen=True)
class TrajectoryCell:
    stratum: tuple[int, int]
    hour: int
    pair: tuple
    p: float | None
    n_a: int
    n_b: int

    @property
    def testable(self) -> bool:
        return self.p is not None

    def significant(self, alpha: float) -> bool:
        return self.p is not None and self.p < alpha


@dataclass
class TrajectoryGrid:
    """All (stratum, hour, pair) cells; untestable cells carry ``p = None``."""

    cells: list[TrajectoryCell]
    strata: tuple[tuple[int, int], ...] = SOFA_STRATA
    hours: tuple[int, ...] = TRAJECTORY_HOURS
    excluded_missing_sofa6: int = 0

    @property
    def n_testable(self) -> int:
        return sum(c.testable for c in self.cells)

    def n_significant(self, alpha: float) -> int:
        return sum(c.significant(alpha) for c in self.cells)

    def p_value(self, stratum, hour, a, b) -> float | None:
        key = tuple(sorted((a, b)))
        for c in self.cells:
            if c.stratum == tuple(stratum) and c.hour == hour and c.pair == key:
                return c.p
        raise KeyError((stratum, hour, a, b))

    def to_csv(self, alpha: float = 0.05) -> str:
        """Long format: stratum, hour, pair, p, significant (blank p when untestable)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stratum", "hour", "pair", "n_a", "n_b", "p", "significant"])
        for c in self.cells:
            w.writerow(
                [
                    f"{c.stratum[0]}-{c.stratum[1]}",
                    c.hour,
                    f"{c.pair[0]}|{c.pair[1]}",
                    c.n_a,
                    c.n_b,
                    "" if c.p is None else repr(c.p),
                    "" if c.p is None else int(c.significant(alpha)),
                ]
            )
        return buf.getvalue()


def trajectory_grid(
    episodes: Sequence[Episode],
    labels: Sequence,
    hours: Sequence[int] = TRAJECTORY_HOURS,
    min_group: int = MIN_GROUP,
    phenotypes: Sequence | None = None,
) -> TrajectoryGrid:
    """Run the pairwise test in every stratum and hour.

    Pairs are taken over ``phenotypes`` (default: every label in the cohort), so
    a phenotype missing from a stratum still contributes untestable cells.
    """
    labels = list(labels)
    if len(labels) != len(episodes):
        raise ValueError("need one label per episode")
    phenos = sorted(set(labels)) if phenotypes is None else sorted(phenotypes)
    strata, missing = stratify_by_sofa6(episodes)
    cells = []
    for stratum in SOFA_STRATA:
        idx = strata[stratum]
        sub_eps = [episodes[i] for i in idx]
        sub_lab = [labels[i] for i in idx]
        for hour in hours:
            tests = pairwise_trajectory_test(sub_eps, sub_lab, hour, min_group)
            for pair in combinations(phenos, 2):
                t = tests.get(pair)
                if t is None:
                    n_a = sum(1 for e, l in zip(sub_eps, sub_lab) if l == pair[0] and e.sofa_at(hour) is not None)
                    n_b = sum(1 for e, l in zip(sub_eps, sub_lab) if l == pair[1] and e.sofa_at(hour) is not None)
                    t = PairTest(None, None, n_a, n_b)
                cells.append(TrajectoryCell(stratum, int(hour), pair, t.p, t.n_a, t.n_b))
    return TrajectoryGrid(cells, SOFA_STRATA, tuple(hours), missing)


def tdi(grid: TrajectoryGrid, alpha: float = 0.05) -> float | Undefined:
    """Share of testable cells whose p-value falls below ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = grid.n_testable
    if n == 0:
        return Undefined("no testable comparisons")
    return grid.n_significant(alpha) / n


# survival -----------------------------------------------------------------------------


@dataclass(frozen=True)
class KMCurve:
    """Product-limit curve.  ``times[0] == 0`` with ``survival[0] == 1``; each later
    entry is a distinct event or censoring time with the risk set just before it."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """Right-continuous step value at ``t``."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.survival[max(i, 0)])


def kaplan_meier_curve(times: Sequence[float], observed: Sequence[bool], horizon: float = 365.0) -> KMCurve:
    t = np.asarray(times, dtype=float)
    d = np.asarray(observed, dtype=bool)
    if t.shape != d.shape:
        raise ValueError("times and event flags must align")
    if np.any(t < 0):
        raise ValueError("survival times must be non-negative")
    # anything beyond the horizon is censored there
    late = t > horizon
    t = np.where(late, horizon, t)
    d = d & ~late
    grid = np.unique(t)
    out_t, out_s, out_n, out_d = [0.0], [1.0], [len(t)], [0]
    s = 1.0
    for ti in grid:
        n_i = int(np.sum(t >= ti))
        d_i = int(np.sum((t == ti) & d))
        if d_i:
            s *= 1.0 - d_i / n_i
        if ti == 0.0:
            out_s[0], out_n[0], out_d[0] = s, n_i, d_i
            continue
        out_t.append(float(ti))
        out_s.append(s)
        out_n.append(n_i)
        out_d.append(d_i)
    return KMCurve(np.array(out_t), np.array(out_s), np.array(out_n), np.array(out_d))


def kaplan_meier(episodes: Sequence[Episode], labels: Sequence, horizon_days: float = 365.0) -> dict:
    """One curve per phenotype label, keyed by label in sorted order."""
    groups: dict = {}
    for e, lab in zip(episodes, labels):
        groups.setdefault(lab, []).append(e.survival)
    out = {}
    for lab in sorted(groups):
        times = [min(t, horizon_days) if math.isinf(t) else t for t, _ in groups[lab]]
        out[lab] = kaplan_meier_curve(times, [bool(ev) for _, ev in groups[lab]], horizon_days)
    return out


def km_to_csv(curves: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phenotype", "time", "survival", "at_risk", "events"])
    for lab, c in curves.items():
        for row in zip(c.times, c.survival, c.at_risk, c.events):
            w.writerow([lab, repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
    return buf.getvalue()


# characteristics table ----------------------------------------------------------------


def _mean_in_window(variable: str, window: float = 6.0) -> Callable[[Episode], float | None]:
    def get(e: Episode):
        vals = [m.value for m in e.window_events(window) if m.variable == variable]
        return float(np.mean(vals)) if vals else None

    return get


@dataclass(frozen=True)
class NumericSummary:
    n: int
    mean: float | None
    sd: float | None
    median: float | None
    q1: float | None
    q3: float | None

    def display(self, use_median: bool) -> str:
        if self.n == 0:
            return "NA"
        if use_median:
            return f"{self.median:.2f} [{self.q1:.2f}, {self.q3:.2f}]"
        return f"{self.mean:.2f} ({self.sd:.2f})"


def summarize_numeric(values: Sequence[float]) -> NumericSummary:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return NumericSummary(0, None, None, None, None, None)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return NumericSummary(int(v.size), float(v.mean()), sd, float(med), float(q1), float(q3))


def is_skewed(values: Sequence[float], threshold: float = SKEW_THRESHOLD) -> bool:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size < 3 or np.all(v == v[0]):
        return False
    return bool(abs(stats.skew(v)) > threshold)


@dataclass
class CharacteristicRow:
    variable: str
    kind: str  # "numeric" or "categorical"
    use_median: bool
    per_group: dict
    test: str | None
    p: float | None


@dataclass
class CharacteristicsTable:
    groups: list
    counts: dict
    rows: list[CharacteristicRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", *[str(g) for g in self.groups], "test", "p"])
        total = sum(self.counts.values())
        w.writerow(["n", *[f"{self.counts[g]} ({100 * self.counts[g] / total:.1f}%)" for g in self.groups], "", ""])
        for r in self.rows:
            if r.kind == "numeric":
                cells = [r.per_group[g].display(r.use_median) for g in self.groups]
            else:
                cells = [r.per_group[g] for g in self.groups]
            w.writerow([r.variable, *cells, r.test or "", "" if r.p is None else f"{r.p:.4g}"])
        return buf.getvalue()


def _numeric_test(samples: list[np.ndarray], use_median: bool) -> tuple[str | None, float | None]:
    samples = [s for s in samples if s.size >= 2]
    if len(samples) < 2:
        return None, None
    if all(np.all(s == samples[0][0]) for s in samples):
        return None, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if len(samples) == 2:
            if use_median:
                return "mann-whitney", mann_whitney(samples[0], samples[1])[1]
            return "t-test", float(stats.ttest_ind(samples[0], samples[1], equal_var=False).pvalue)
        if use_median:
            return "kruskal-wallis", float(stats.kruskal(*samples).pvalue)
        return "anova", float(stats.f_oneway(*samples).pvalue)


def _categorical_test(table: np.ndarray) -> tuple[str | None, float | None]:
    table = table[:, table.sum(axis=0) > 0]
    table = table[table.sum(axis=1) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return None, None
    return "chi-square", float(stats.chi2_contingency(table)[1])


def phenotype_characteristics(
    episodes: Sequence[Episode],
    labels: Sequence,
    numeric: Mapping[str, Callable[[Episode], float | None]] | None = None,
    categorical: Mapping[str, Callable[[Episode], object]] | None = None,
    window_hours: float = 6.0,
) -> CharacteristicsTable:
    """Per-phenotype summaries with a between-group test per variable.

    By default the numeric variables are hour-6 SOFA and the in-window mean of
    every measured variable; the categoricals are each static variable and the
    discharge status.  A numeric variable is shown as median [IQR] when its
    cohort-wide skewness exceeds 1 in absolute value, else as mean (SD).
    """
    labels = list(labels)
    if len(labels) != len(episodes):
        raise ValueError("need one label per episode")
    groups = sorted(set(labels))
    if numeric is None:
        variables = sorted({m.variable for e in episodes for m in e.events})
        numeric = {"sofa6": lambda e: e.sofa_at(6)}
        numeric.update({v: _mean_in_window(v, window_hours) for v in variables})
    if categorical is None:
        statics = sorted({k for e in episodes for k in e.statics})
        categorical = {s: (lambda e, s=s: e.statics.get(s)) for s in statics}
        categorical["discharge_status"] = lambda e: e.discharge_status
    counts = {g: labels.count(g) for g in groups}
    rows = []
    for name, get in numeric.items():
        values = [get(e) for e in episodes]
        use_median = is_skewed(values)
        per = {}
        samples = []
        for g in groups:
            vg = [v for v, l in zip(values, labels) if l == g]
            per[g] = summarize_numeric(vg)
            samples.append(np.asarray([v for v in vg if v is not None], dtype=float))
        test, p = _numeric_test(samples, use_median)
        rows.append(CharacteristicRow(name, "numeric", use_median, per, test, p))
    for name, get in categorical.items():
        values = [get(e) for e in episodes]
        levels = sorted({v for v in values if v is not None}, key=str)
        table = np.array([[sum(1 for v, l in zip(values, labels) if l == g and v == lev) for lev in levels] for g in groups])
        for li, lev in enumerate(levels):
            per = {}
            for gi, g in enumerate(groups):
                pct = 100.0 * table[gi, li] / counts[g] if counts[g] else 0.0
                per[g] = f"{table[gi, li]} ({pct:.1f}%)"
            test, p = _categorical_test(table) if li == 0 else (None, None)
            rows.append(CharacteristicRow(f"{name}={lev}", "categorical", False, per, test, p))
    return CharacteristicsTable(groups, counts, rows)
