"""Synthetic cohorts with planted cluster structure.

Stands in for the restricted ICU databases.  Cluster membership drives the
measurement distributions, discharge status, SOFA trajectories and (optionally)
treatment response, so each stage of the pipeline has something to find.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..seeding import rng_for
from .io import CohortSchema
from .model import CohortError, Episode, Measurement, TreatmentRecord


@dataclass
class VariableSpec:
    means: list[float]
    sd: float
    low: float
    high: float


@dataclass
class TreatmentSpec:
    """Logistic in-hospital mortality model for treated episodes.

    ``logit P(death) = logit(mortality[c]) + time_slope[c] * (ttv - ttv_center)
    + fluid_slope[c] * (fluid - fluid_center) + age_slope * (age - 65) / 10``
    """

    time_slope: list[float]
    fluid_slope: list[float]
    age_slope: float = 0.0
    mean_time_to_vasopressor: float = 2.0
    max_time_to_vasopressor: float = 14.0
    mean_fluid_l: float = 2.5
    ttv_center: float = 2.0
    fluid_center: float = 2.5
    eligible_fraction: float = 1.0


@dataclass
class SyntheticSpec:
    n_patients: int
    variables: dict[str, VariableSpec]
    mortality: list[float]
    sofa6_mean: list[float]
    sofa_slope: list[float]
    weights: list[float] | None = None
    statics: dict[str, list[list[float]]] = field(default_factory=dict)
    events_per_variable: float = 2.0
    window_hours: float = 6.0
    late_event_fraction: float = 0.0
    max_episodes_per_patient: int = 1
    sofa6_sd: float = 2.0
    sofa_noise: float = 1.0
    treatment: TreatmentSpec | None = None
    statuses: tuple[str, str] = ("alive", "dead")

    @property
    def k(self) -> int:
        return len(self.mortality)

    def validate(self) -> None:
        k = self.k
        if k < 2:
            raise CohortError(f"synthetic spec needs k >= 2 planted clusters, got {k}")
        if self.n_patients < 1:
            raise CohortError("synthetic spec needs at least one patient")
        lists = {"sofa6_mean": self.sofa6_mean, "sofa_slope": self.sofa_slope}
        if self.weights is not None:
            lists["weights"] = self.weights
        for name, values in lists.items():
            if len(values) != k:
                raise CohortError(f"{name} has {len(values)} entries, expected {k}")
        for name, v in self.variables.items():
            if len(v.means) != k:
                raise CohortError(f"variable {name} has {len(v.means)} cluster means, expected {k}")
        for name, probs in self.statics.items():
            if len(probs) != k:
                raise CohortError(f"static {name} has {len(probs)} cluster distributions, expected {k}")
            for p in probs:
                if not np.isclose(sum(p), 1.0):
                    raise CohortError(f"static {name}: category probabilities must sum to 1")
        if self.treatment is not None:
            if len(self.treatment.time_slope) != k or len(self.treatment.fluid_slope) != k:
                raise CohortError("treatment slopes need one entry per planted cluster")

    def schema(self) -> CohortSchema:
        return CohortSchema(
            statics={name: len(probs[0]) for name, probs in self.statics.items()},
            variables={name: (v.low, v.high) for name, v in self.variables.items()},
            statuses=list(self.statuses),
            death_status=self.statuses[1],
            window_hours=self.window_hours,
        )


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def generate_synthetic_cohort(spec: SyntheticSpec, seed: int) -> list[Episode]:
    """Draw a cohort from ``spec``; the planted cluster sits in ``Episode.planted_label``."""
    spec.validate()
    rng = rng_for(seed, "synthetic_cohort")
    k = spec.k
    weights = np.asarray(spec.weights if spec.weights is not None else np.ones(k), dtype=float)
    weights = weights / weights.sum()
    var_names = list(spec.variables)
    width = len(str(spec.n_patients))

    episodes: list[Episode] = []
    for pi in range(spec.n_patients):
        cluster = int(rng.choice(k, p=weights))
        n_eps = int(rng.integers(1, spec.max_episodes_per_patient + 1))
        age = float(np.clip(rng.normal(65.0, 15.0), 18.0, 100.0))
        for ej in range(n_eps):
            statics = {
                name: int(rng.choice(len(probs[cluster]), p=probs[cluster])) for name, probs in spec.statics.items()
            }
            events = []
            for name in var_names:
                v = spec.variables[name]
                for _ in range(int(rng.poisson(spec.events_per_variable))):
                    late = spec.late_event_fraction > 0 and rng.random() < spec.late_event_fraction
                    t = rng.uniform(spec.window_hours, 24.0) if late else rng.uniform(0.0, spec.window_hours)
                    value = float(np.clip(rng.normal(v.means[cluster], v.sd), v.low, v.high))
                    events.append(Measurement(name, round(float(t), 4), value))

            sofa6 = int(np.clip(np.rint(rng.normal(spec.sofa6_mean[cluster], spec.sofa6_sd)), 0, 24))
            sofa = []
            for h in range(25):
                if h == 6:
                    s = sofa6
                else:
                    drift = spec.sofa_slope[cluster] * (h - 6) if h > 6 else 0.0
                    s = int(np.clip(np.rint(sofa6 + drift + rng.normal(0.0, spec.sofa_noise)), 0, 24))
                sofa.append((h, s))

            p_death = spec.mortality[cluster]
            treatment = None
            if spec.treatment is not None and rng.random() < spec.treatment.eligible_fraction:
                ts = spec.treatment
                ttv = float(min(rng.exponential(ts.mean_time_to_vasopressor), ts.max_time_to_vasopressor))
                fluid = float(rng.gamma(2.0, ts.mean_fluid_l / 2.0))
                eta = (
                    _logit(p_death)
                    + ts.time_slope[cluster] * (ttv - ts.ttv_center)
                    + ts.fluid_slope[cluster] * (fluid - ts.fluid_center)
                    + ts.age_slope * (age - 65.0) / 10.0
                )
                p_death = float(1.0 / (1.0 + np.exp(-eta)))
                gender = statics.get("gender", int(rng.integers(0, 2)))
                treatment = (ttv, fluid, {"age": round(age, 2), "gender": float(gender)})
            died = bool(rng.random() < p_death)
            if died:
                survival = (float(rng.uniform(0.5, 30.0)), True)
            else:
                yearly = min(0.95, 0.5 * spec.mortality[cluster])
                rate = -np.log(1.0 - yearly) / 365.0
                t_death = float(rng.exponential(1.0 / rate)) if rate > 0 else np.inf
                survival = (t_death, True) if t_death <= 365.0 else (365.0, False)
            record = None
            if treatment is not None:
                ttv, fluid, adjusters = treatment
                record = TreatmentRecord(
                    iv_fluid_volume_liters=round(fluid, 4),
                    time_to_vasopressor_hours=round(ttv, 4),
                    in_hospital_death=died,
                    adjusters=adjusters,
                )
            episodes.append(
                Episode(
                    episode_id=f"E{pi:0{width}d}-{ej}",
                    patient_id=f"P{pi:0{width}d}",
                    statics=statics,
                    events=tuple(events),
                    discharge_status=int(died),
                    sofa=tuple(sofa),
                    survival=survival,
                    treatment=record,
                    planted_label=cluster,
                )
            )
    return episodes


DEFAULT_VARIABLES = {
    # name: (baseline mean, sd, low, high)
    "HR": (90.0, 15.0, 0.0, 300.0),
    "SBP": (115.0, 18.0, 0.0, 300.0),
    "RR": (20.0, 5.0, 0.0, 80.0),
    "TEMP": (37.0, 0.8, 25.0, 45.0),
    "LACTATE": (2.0, 1.0, 0.0, 30.0),
    "CREAT": (1.2, 0.5, 0.0, 20.0),
    "WBC": (11.0, 4.0, 0.0, 200.0),
    "PLT": (220.0, 70.0, 0.0, 2000.0),
}


# cluster rank on each variable; every variable separates all four clusters,
# with a different ordering so no single severity axis explains the structure
_BLOB_ORDER = [(0, 1, 2, 3), (1, 3, 0, 2), (2, 0, 3, 1), (3, 2, 1, 0), (1, 0, 3, 2), (2, 3, 0, 1), (0, 2, 1, 3), (3, 1, 2, 0)]


def four_blob_spec(n_patients: int = 400, separation: float = 3.0) -> SyntheticSpec:
    """Four well-separated clusters.

    Adjacent clusters differ by ``separation`` SDs on every variable.  The lowest
    cluster mean sits 4 SD above the variable's plausibility floor so that
    clipping never creates ties.
    """
    variables = {}
    for vi, (name, (base, sd, lo, hi)) in enumerate(DEFAULT_VARIABLES.items()):
        floor = max(base - 1.5 * separation * sd, lo + 4.0 * sd)
        means = [floor + _BLOB_ORDER[vi][c] * separation * sd for c in range(4)]
        variables[name] = VariableSpec(means=means, sd=sd, low=lo, high=max(hi, means[-1] + 10 * sd))
    return SyntheticSpec(
        n_patients=n_patients,
        variables=variables,
        mortality=[0.1, 0.2, 0.3, 0.4],
        sofa6_mean=[3.0, 5.0, 7.0, 9.0],
        sofa_slope=[-0.2, 0.0, 0.1, 0.3],
        statics={
            "gender": [[0.5, 0.5]] * 4,
            "chf": [[0.8, 0.2]] * 4,
        },
        events_per_variable=4.0,
    )


def outcome_split_spec(
    n_patients: int = 600,
    nuisance_separation: float = 1.5,
    outcome_separation: float = 1.5,
    mortality: tuple[float, float] = (0.1, 0.6),
) -> SyntheticSpec:
    """Eight clusters on a 4 x 2 grid where the dominant axis carries no outcome signal.

    The first half of the variables separate four outcome-neutral groups by
    ``nuisance_separation`` SDs; the second half separate two groups by the
    smaller ``outcome_separation`` and those two groups differ in mortality.
    Cluster ``c`` sits at nuisance level ``c // 2`` and outcome level ``c % 2``.
    """
    names = list(DEFAULT_VARIABLES)
    half = len(names) // 2
    variables = {}
    for vi, name in enumerate(names):
        base, sd, lo, hi = DEFAULT_VARIABLES[name]
        if vi < half:
            floor = max(base - 1.5 * nuisance_separation * sd, lo + 4.0 * sd)
            means = [floor + _BLOB_ORDER[vi][c // 2] * nuisance_separation * sd for c in range(8)]
        else:
            floor = max(base - 0.5 * outcome_separation * sd, lo + 4.0 * sd)
            means = [floor + (c % 2) * outcome_separation * sd for c in range(8)]
        variables[name] = VariableSpec(means=means, sd=sd, low=lo, high=max(hi, max(means) + 10 * sd))
    return SyntheticSpec(
        n_patients=n_patients,
        variables=variables,
        mortality=[mortality[c % 2] for c in range(8)],
        sofa6_mean=[4.0 + 3.0 * (c % 2) for c in range(8)],
        sofa_slope=[0.3 * (c % 2) - 0.1 for c in range(8)],
        statics={"gender": [[0.5, 0.5]] * 8},
        events_per_variable=4.0,
    )
