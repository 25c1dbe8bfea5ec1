"""Episode data model, patient-level splitting and treatment-cohort filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..seeding import rng_for

SOFA_MAX = 24


class CohortError(ValueError):
    """Base class for cohort validation failures."""


@dataclass(frozen=True)
class Measurement:
    variable: str
    timestamp: float
    value: float


@dataclass(frozen=True)
class TreatmentRecord:
    """Treatment exposures for one episode plus the annotations used to filter them.

    ``iv_fluid_volume_liters`` is the cumulative IV fluid within 12 h after the
    first MAP < 65 reading; ``time_to_vasopressor_hours`` runs from that reading
    to vasopressor start.
    """

    iv_fluid_volume_liters: float
    time_to_vasopressor_hours: float
    in_hospital_death: bool
    adjusters: Mapping[str, float] = field(default_factory=dict)
    received_vasopressor: bool = True
    first_vasopressor: str = "norepinephrine"
    map_below_65_within_1h: bool = True
    chf_flag: bool = False
    renal_failure_flag: bool = False

    def __post_init__(self):
        if not self.iv_fluid_volume_liters >= 0:
            raise CohortError(f"IV fluid volume must be >= 0, got {self.iv_fluid_volume_liters}")
        if not self.time_to_vasopressor_hours >= 0:
            raise CohortError(f"time to vasopressor must be >= 0, got {self.time_to_vasopressor_hours}")


def canonical_event_order(events: Iterable[Measurement]) -> tuple[Measurement, ...]:
    """Sort by timestamp, then variable name; the sort is stable so file order breaks remaining ties."""
    return tuple(sorted(events, key=lambda m: (m.timestamp, m.variable)))


@dataclass(frozen=True)
class Episode:
    """One ICU stay.

    ``statics`` maps static variable name to category index.  ``sofa`` holds
    ``(hour, score)`` pairs sorted by hour.  ``discharge_status`` is a category
    index into the schema's status list.  ``planted_label`` is only set by the
    synthetic generator and must never reach the model.
    """

    episode_id: str
    patient_id: str
    statics: Mapping[str, int]
    events: tuple[Measurement, ...]
    discharge_status: int
    sofa: tuple[tuple[int, int], ...] = ()
    survival: tuple[float, bool] = (math.inf, False)
    treatment: TreatmentRecord | None = None
    planted_label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", canonical_event_order(self.events))
        sofa = tuple(sorted((int(h), int(s)) for h, s in self.sofa))
        hours = [h for h, _ in sofa]
        if len(set(hours)) != len(hours):
            raise CohortError(f"episode {self.episode_id}: duplicate SOFA hour")
        for h, s in sofa:
            if not 0 <= s <= SOFA_MAX:
                raise CohortError(f"episode {self.episode_id}: SOFA score {s} outside [0, {SOFA_MAX}]")
            if not 0 <= h <= 24:
                raise CohortError(f"episode {self.episode_id}: SOFA hour {h} outside [0, 24]")
        object.__setattr__(self, "sofa", sofa)
        t, event = self.survival
        if not t >= 0:
            raise CohortError(f"episode {self.episode_id}: negative survival time")
        object.__setattr__(self, "survival", (float(t), bool(event)))

    def sofa_at(self, hour: int) -> int | None:
        for h, s in self.sofa:
            if h == hour:
                return s
        return None

    def window_events(self, window_hours: float = 6.0) -> tuple[Measurement, ...]:
        return tuple(m for m in self.events if 0.0 <= m.timestamp <= window_hours)


@dataclass
class CohortSplit:
    train: list[Episode]
    test: list[Episode]

    @property
    def train_fraction(self) -> float:
        total = len(self.train) + len(self.test)
        return len(self.train) / total if total else float("nan")


def split_by_patient(episodes: Sequence[Episode], ratio: float = 0.8, seed: int = 0) -> CohortSplit:
    """Split episodes so that every patient lands wholly in one partition.

    Patients are shuffled with a seed-derived stream; the train partition is the
    shuffled prefix whose episode share is closest to ``ratio``.  Episode order
    inside each partition follows the input order.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    patients = sorted({e.patient_id for e in episodes})
    if len(patients) < 2:
        raise CohortError("cannot split a cohort with fewer than two distinct patients")
    counts: dict[str, int] = {}
    for e in episodes:
        counts[e.patient_id] = counts.get(e.patient_id, 0) + 1
    order = rng_for(seed, "split_by_patient").permutation(len(patients))
    shuffled = [patients[i] for i in order]
    cum = np.cumsum([counts[p] for p in shuffled])
    total = cum[-1]
    # prefix sizes 1..n-1 keep both sides non-empty
    gaps = np.abs(cum[:-1] / total - ratio)
    n_train = int(np.argmin(gaps)) + 1
    train_ids = set(shuffled[:n_train])
    return CohortSplit(
        train=[e for e in episodes if e.patient_id in train_ids],
        test=[e for e in episodes if e.patient_id not in train_ids],
    )


MAX_TIME_TO_VASOPRESSOR_H = 12.0


def treatment_exclusion_reason(episode: Episode) -> str | None:
    t = episode.treatment
    if t is None:
        return "no treatment record"
    if not t.received_vasopressor:
        return "no vasopressor"
    if not t.map_below_65_within_1h:
        return "MAP stayed >= 65 after vasopressor start"
    if t.first_vasopressor.strip().lower() != "norepinephrine":
        return "first vasopressor not norepinephrine"
    if t.time_to_vasopressor_hours > MAX_TIME_TO_VASOPRESSOR_H:
        return "time to vasopressor > 12 h"
    if t.chf_flag or t.renal_failure_flag:
        return "congestive heart failure or renal failure"
    return None


def filter_treatment_cohort(episodes: Sequence[Episode]) -> list[Episode]:
    """Keep episodes eligible for the treatment-effect analysis, in input order."""
    return [e for e in episodes if treatment_exclusion_reason(e) is None]
