"""Self-test routines behind the ``check`` subcommand: brute-force metric
oracles, closed-form anchors and a finite-difference check of every loss term."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import evalstats as ev
from .clusterop import assign_clusters, init_centroids
from .cohort import Episode, four_blob_spec, generate_synthetic_cohort
from .navigator import sample_triplets
from .netcore.gradcheck import GradCheckReport, grad_check
from .seeding import rng_for
from .trainer import TrainConfig, build_model, infer_embeddings, objective_closure
from .treatfx import e_value


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


# brute-force oracles (plain loops, no vectorization) ----------------------------------


def _dist(a, b) -> float:
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def brute_silhouette(E, labels) -> float:
    n = len(labels)
    total = 0.0
    for i in range(n):
        same = [_dist(E[i], E[j]) for j in range(n) if j != i and labels[j] == labels[i]]
        if not same:
            continue  # singleton contributes 0
        a = sum(same) / len(same)
        b = min(
            sum(_dist(E[i], E[j]) for j in range(n) if labels[j] == c) / sum(1 for j in range(n) if labels[j] == c)
            for c in set(labels)
            if c != labels[i]
        )
        total += (b - a) / max(a, b)
    return total / n


def _centroid(E, labels, c):
    rows = [E[j] for j in range(len(labels)) if labels[j] == c]
    return [sum(float(r[d]) for r in rows) / len(rows) for d in range(len(E[0]))]


def brute_calinski_harabasz(E, labels) -> float:
    n, clusters = len(labels), sorted(set(labels))
    k = len(clusters)
    overall = [sum(float(E[i][d]) for i in range(n)) / n for d in range(len(E[0]))]
    between = within = 0.0
    for c in clusters:
        cc = _centroid(E, labels, c)
        members = [i for i in range(n) if labels[i] == c]
        between += len(members) * _dist(cc, overall) ** 2
        within += sum(_dist(E[i], cc) ** 2 for i in members)
    return (between / (k - 1)) / (within / (n - k))


def brute_davies_bouldin(E, labels) -> float:
    clusters = sorted(set(labels))
    cents = {c: _centroid(E, labels, c) for c in clusters}
    spread = {}
    for c in clusters:
        members = [i for i in range(len(labels)) if labels[i] == c]
        spread[c] = sum(_dist(E[i], cents[c]) for i in members) / len(members)
    worst = [
        max((spread[a] + spread[b]) / _dist(cents[a], cents[b]) for b in clusters if b != a) for a in clusters
    ]
    return sum(worst) / len(worst)


def brute_u(x, y) -> float:
    """Pairs with ``x > y`` plus half the ties."""
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in x for b in y)


# micro-batch gradient checks ----------------------------------------------------------

KINK_GAP = 1e-3


def microbatch_setup(seed: int = 0):
    """Small model and a 4-episode batch with two episodes of each status."""
    spec = four_blob_spec(n_patients=60)
    eps = generate_synthetic_cohort(spec, seed)
    alive = [e for e in eps if e.discharge_status == 0][:2]
    dead = [e for e in eps if e.discharge_status == 1][:2]
    batch = alive + dead
    cfg = TrainConfig(seed=seed, k=2, dim=8, hidden=[6], embed_dim=4, n_bins=4, pretrain_epochs=0, epochs=0)
    model = build_model(batch, cfg, spec.schema().statics)
    data = model.encode_episodes(batch)
    E = infer_embeddings(batch, model, data)
    model.centroids = init_centroids(E, cfg.k, seed)
    assignments = assign_clusters(E, model.centroids.M)
    return model, data, np.arange(len(batch)), assignments


def triplet_margin_gaps(model, data, rows, triplet_seed: int) -> np.ndarray:
    triplets, _ = sample_triplets(data.statuses, rows, rng_for(triplet_seed, "fixed-triplets"))
    E = model.embed(data, np.arange(len(data))).value
    gaps = [
        np.linalg.norm(E[t.anchor] - E[t.positive]) - np.linalg.norm(E[t.anchor] - E[t.negative]) + model.head.margin
        for t in triplets
    ]
    return np.abs(np.array(gaps))


COMPONENTS = {
    # name: (lambdas, kappas)
    "reconstruction": ((1.0, 0.0, 0.0), (1.0, 1.0)),
    "clustering": ((0.0, 1.0, 0.0), (1.0, 1.0)),
    "probability": ((0.0, 0.0, 1.0), (1.0, 0.0)),
    "distance": ((0.0, 0.0, 1.0), (0.0, 1.0)),
    "full": ((1.0, 0.5, 0.5), (1.0, 1.0)),
}


def microbatch_gradcheck(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """Finite-difference check of each loss term and the full objective.

    The triplet seed is advanced until every hinge sits at least ``KINK_GAP``
    away from its kink.
    """
    model, data, rows, assignments = microbatch_setup(seed)
    triplet_seed = seed
    while np.any(triplet_margin_gaps(model, data, rows, triplet_seed) < KINK_GAP):
        triplet_seed += 1
    params = model.parameters(include_head=True)
    reports = {}
    for name, (lambdas, (k1, k2)) in COMPONENTS.items():
        model.head.kappa1, model.head.kappa2 = k1, k2
        f = objective_closure(model, data, rows, assignments, lambdas, triplet_seed)
        reports[name] = grad_check(f, params, h=h, tol=tol)
    model.head.kappa1, model.head.kappa2 = model.config.kappa1, model.config.kappa2
    return reports


# fixtures -----------------------------------------------------------------------------


def km_fixture() -> list[Episode]:
    """Deaths at day 1 (1 of 4) and day 2 (1 of 3); the other two censored at the horizon."""
    surv = [(1.0, True), (2.0, True), (365.0, False), (365.0, False)]
    return [Episode(f"K{i}", f"K{i}", {}, (), 0, survival=s) for i, s in enumerate(surv)]


def all_significant_grid(n_phenotypes: int = 4) -> ev.TrajectoryGrid:
    """Every stratum, hour and pair testable with ``p = 0``."""
    phenos = list(range(n_phenotypes))
    cells = [
        ev.TrajectoryCell(s, h, pair, 0.0, 3, 3)
        for s in ev.SOFA_STRATA
        for h in ev.TRAJECTORY_HOURS
        for pair in combinations(phenos, 2)
    ]
    return ev.TrajectoryGrid(cells)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = []

    rng = rng_for(seed, "selftest-metrics")
    E = rng.normal(size=(30, 3))
    labels = np.repeat([0, 1, 2], 10)
    rng.shuffle(labels)
    pairs = [
        ("silhouette", ev.silhouette(E, labels), brute_silhouette(E, labels)),
        ("calinski_harabasz", ev.calinski_harabasz(E, labels), brute_calinski_harabasz(E, labels)),
        ("davies_bouldin", ev.davies_bouldin(E, labels), brute_davies_bouldin(E, labels)),
    ]
    for name, got, want in pairs:
        results.append(CheckResult(f"metric:{name}", abs(got - want) <= 1e-9, f"{got!r} vs oracle {want!r}"))

    x, y = [1, 4, 4, 7, 9], [2, 3, 4, 8, 10]
    u, _ = ev.mann_whitney(x, y)
    results.append(CheckResult("mann_whitney_u", u == brute_u(x, y), f"U={u} vs {brute_u(x, y)}"))

    curve = ev.kaplan_meier(km_fixture(), [0, 0, 0, 0])[0]
    results.append(CheckResult("kaplan_meier", curve.at(2.0) == 0.5, f"S(2)={curve.at(2.0)!r}"))

    anchors = {1.318: 1.56, 1.156: 1.36, 1.160: 1.37}
    for o, want in anchors.items():
        got = e_value(o).e_value_point
        results.append(CheckResult(f"e_value({o})", abs(got - want) <= 0.005, f"{got:.4f} vs {want}"))

    grid = all_significant_grid()
    results.append(
        CheckResult("tdi_grid", grid.n_testable == 648 and ev.tdi(grid) == 1.0, f"{grid.n_testable} comparisons")
    )

    for name, rep in microbatch_gradcheck(seed).items():
        results.append(CheckResult(f"gradient:{name}", bool(rep.passed), str(rep)))
    return results
