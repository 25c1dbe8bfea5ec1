"""CSV ingestion and export for cohorts.

File contracts (UTF-8, header row required)::

    statics.csv    episode_id, patient_id, <one column per static variable>
    events.csv     episode_id, variable, timestamp_hours, value
    outcomes.csv   episode_id, discharge_status, survival_days, death_event
    sofa.csv       episode_id, hour, score
    treatment.csv  episode_id, received_vasopressor, first_vasopressor,
                   map_below_65_within_1h, time_to_vasopressor_hours,
                   iv_fluid_volume_l, chf_flag, renal_failure_flag,
                   [in_hospital_death], <adjuster columns>

Static columns hold integer category indices.  Treatment annotations are
precomputed upstream; this module only validates them.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .model import CohortError, Episode, Measurement, TreatmentRecord

log = logging.getLogger(__name__)

STATIC_KEYS = ("episode_id", "patient_id")
EVENT_COLUMNS = ("episode_id", "variable", "timestamp_hours", "value")
OUTCOME_COLUMNS = ("episode_id", "discharge_status", "survival_days", "death_event")
SOFA_COLUMNS = ("episode_id", "hour", "score")
TREATMENT_COLUMNS = (
    "episode_id",
    "received_vasopressor",
    "first_vasopressor",
    "map_below_65_within_1h",
    "time_to_vasopressor_hours",
    "iv_fluid_volume_l",
    "chf_flag",
    "renal_failure_flag",
)
OPTIONAL_TREATMENT_COLUMNS = ("in_hospital_death",)


class SchemaError(CohortError):
    """A file header does not match its contract."""


class ReferentialError(CohortError):
    """A file references an episode that has no statics row."""


@dataclass
class CohortSchema:
    """Which statics and measurements to expect and how to validate them.

    ``statics`` maps a static variable to its number of categories;
    ``variables`` maps a time-varying variable to its plausibility range.
    """

    statics: dict[str, int]
    variables: dict[str, tuple[float, float]]
    statuses: list[str] = field(default_factory=lambda: ["alive", "dead"])
    death_status: str = "dead"
    window_hours: float = 6.0

    def __post_init__(self):
        self.variables = {k: (float(lo), float(hi)) for k, (lo, hi) in self.variables.items()}
        self.statics = {k: int(v) for k, v in self.statics.items()}
        for name, (lo, hi) in self.variables.items():
            if not lo <= hi:
                raise CohortError(f"variable {name}: empty plausibility range [{lo}, {hi}]")
        if self.death_status not in self.statuses:
            raise CohortError(f"death status {self.death_status!r} not among statuses {self.statuses}")

    @property
    def death_index(self) -> int:
        return self.statuses.index(self.death_status)

    def to_dict(self) -> dict:
        return {
            "statics": dict(self.statics),
            "variables": {k: [lo, hi] for k, (lo, hi) in self.variables.items()},
            "statuses": list(self.statuses),
            "death_status": self.death_status,
            "window_hours": self.window_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSchema":
        return cls(
            statics=dict(d["statics"]),
            variables={k: tuple(v) for k, v in d["variables"].items()},
            statuses=list(d.get("statuses", ["alive", "dead"])),
            death_status=d.get("death_status", "dead"),
            window_hours=float(d.get("window_hours", 6.0)),
        )


@dataclass
class LoadReport:
    rows_read: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "t", "yes", "y"):
        return True
    if v in ("0", "false", "f", "no", "n", ""):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _read(path: Path, required: Sequence[str], label: str) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise SchemaError(f"{label}: missing header row ({path})")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{label}: header lacks required column(s) {missing} ({path})")
        if len(set(header)) != len(header):
            raise SchemaError(f"{label}: duplicate column names in header ({path})")
        reader.fieldnames = header
        rows = [{k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()} for row in reader]
    return header, rows


def load_cohort(
    static_path,
    events_path,
    outcomes_path,
    sofa_path=None,
    treatment_path=None,
    schema: CohortSchema | None = None,
) -> tuple[list[Episode], LoadReport]:
    """Read and validate the cohort CSVs.

    Rows with unparseable or implausible values are dropped one at a time and
    tallied in the returned :class:`LoadReport`.  A malformed header raises
    :class:`SchemaError`; a reference to an episode absent from the statics file
    raises :class:`ReferentialError`.  Episodes come back in statics-file order.
    """
    if schema is None:
        raise ValueError("a CohortSchema is required")
    report = LoadReport()

    header, static_rows = _read(Path(static_path), STATIC_KEYS + tuple(schema.statics), "statics")
    extra = [c for c in header if c not in STATIC_KEYS and c not in schema.statics]
    if extra:
        report.warn(f"statics: ignoring columns not in schema: {extra}")
    statics: dict[str, tuple[str, dict[str, int]]] = {}
    for row in static_rows:
        report.rows_read["statics"] += 1
        eid = row["episode_id"]
        if eid in statics:
            raise CohortError(f"statics: duplicate episode_id {eid!r}")
        cats = {}
        for name, n_cat in schema.statics.items():
            try:
                c = int(row[name])
            except (TypeError, ValueError):
                raise CohortError(f"statics: episode {eid!r} has non-integer category for {name!r}") from None
            if not 0 <= c < n_cat:
                raise CohortError(f"statics: episode {eid!r} category {c} for {name!r} outside [0, {n_cat})")
            cats[name] = c
        statics[eid] = (row["patient_id"], cats)

    def check_ref(eid: str, label: str):
        if eid not in statics:
            raise ReferentialError(f"{label}: episode {eid!r} has no statics row")

    _, event_rows = _read(Path(events_path), EVENT_COLUMNS, "events")
    events: dict[str, list[Measurement]] = defaultdict(list)
    for row in event_rows:
        report.rows_read["events"] += 1
        eid = row["episode_id"]
        check_ref(eid, "events")
        var = row["variable"]
        if var not in schema.variables:
            report.dropped["events: unknown variable"] += 1
            continue
        try:
            t = float(row["timestamp_hours"])
            v = float(row["value"])
        except (TypeError, ValueError):
            report.dropped["events: unparseable"] += 1
            continue
        lo, hi = schema.variables[var]
        if not (math.isfinite(v) and lo <= v <= hi):
            report.dropped["events: value outside plausibility range"] += 1
            continue
        if not (math.isfinite(t) and t >= 0):
            report.dropped["events: invalid timestamp"] += 1
            continue
        events[eid].append(Measurement(var, t, v))
    if not event_rows:
        report.warn("events file has no rows; every pseudo text will be empty")

    _, outcome_rows = _read(Path(outcomes_path), OUTCOME_COLUMNS, "outcomes")
    outcomes: dict[str, tuple[int, float, bool]] = {}
    for row in outcome_rows:
        report.rows_read["outcomes"] += 1
        eid = row["episode_id"]
        check_ref(eid, "outcomes")
        status = row["discharge_status"]
        if status not in schema.statuses:
            raise CohortError(f"outcomes: episode {eid!r} status {status!r} not in {schema.statuses}")
        try:
            days = float(row["survival_days"]) if row["survival_days"] not in ("", None) else math.inf
            event = _parse_bool(row["death_event"])
        except ValueError as exc:
            raise CohortError(f"outcomes: episode {eid!r}: {exc}") from None
        outcomes[eid] = (schema.statuses.index(status), days, event)
    missing_outcomes = [eid for eid in statics if eid not in outcomes]
    if missing_outcomes:
        raise ReferentialError(f"outcomes: no row for episode(s) {missing_outcomes[:5]}")

    sofa: dict[str, dict[int, int]] = defaultdict(dict)
    if sofa_path is not None:
        _, sofa_rows = _read(Path(sofa_path), SOFA_COLUMNS, "sofa")
        for row in sofa_rows:
            report.rows_read["sofa"] += 1
            eid = row["episode_id"]
            check_ref(eid, "sofa")
            try:
                h, s = int(row["hour"]), int(row["score"])
            except (TypeError, ValueError):
                report.dropped["sofa: unparseable"] += 1
                continue
            if not (0 <= h <= 24 and 0 <= s <= 24):
                report.dropped["sofa: hour or score outside [0, 24]"] += 1
                continue
            if h in sofa[eid]:
                report.dropped["sofa: duplicate hour"] += 1
                continue
            sofa[eid][h] = s

    treatments: dict[str, TreatmentRecord] = {}
    if treatment_path is not None:
        header, treat_rows = _read(Path(treatment_path), TREATMENT_COLUMNS, "treatment")
        adjuster_cols = [c for c in header if c not in TREATMENT_COLUMNS and c not in OPTIONAL_TREATMENT_COLUMNS]
        for row in treat_rows:
            report.rows_read["treatment"] += 1
            eid = row["episode_id"]
            check_ref(eid, "treatment")
            try:
                if row.get("in_hospital_death") not in (None, ""):
                    died = _parse_bool(row["in_hospital_death"])
                else:
                    died = outcomes[eid][0] == schema.death_index
                adjusters = {}
                for c in adjuster_cols:
                    if row[c] not in ("", None):
                        adjusters[c] = float(row[c])
                treatments[eid] = TreatmentRecord(
                    iv_fluid_volume_liters=float(row["iv_fluid_volume_l"]),
                    time_to_vasopressor_hours=float(row["time_to_vasopressor_hours"]),
                    in_hospital_death=died,
                    adjusters=adjusters,
                    received_vasopressor=_parse_bool(row["received_vasopressor"]),
                    first_vasopressor=row["first_vasopressor"],
                    map_below_65_within_1h=_parse_bool(row["map_below_65_within_1h"]),
                    chf_flag=_parse_bool(row["chf_flag"]),
                    renal_failure_flag=_parse_bool(row["renal_failure_flag"]),
                )
            except (TypeError, ValueError):
                report.dropped["treatment: invalid row"] += 1

    episodes = []
    for eid, (pid, cats) in statics.items():
        status, days, event = outcomes[eid]
        episodes.append(
            Episode(
                episode_id=eid,
                patient_id=pid,
                statics=cats,
                events=tuple(events.get(eid, ())),
                discharge_status=status,
                sofa=tuple(sofa.get(eid, {}).items()),
                survival=(days, event),
                treatment=treatments.get(eid),
            )
        )
    if report.n_dropped:
        log.info("load_cohort dropped %d row(s): %s", report.n_dropped, dict(report.dropped))
    return episodes, report


def write_cohort(episodes: Sequence[Episode], out_dir, schema: CohortSchema) -> dict[str, Path]:
    """Write episodes in the CSV contract read by :func:`load_cohort`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("statics", "events", "outcomes", "sofa", "treatment")}
    static_names = list(schema.statics)
    adjuster_names = sorted({k for e in episodes if e.treatment for k in e.treatment.adjusters})

    with open(paths["statics"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*STATIC_KEYS, *static_names])
        for e in episodes:
            w.writerow([e.episode_id, e.patient_id, *(e.statics[n] for n in static_names)])
    with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_COLUMNS)
        for e in episodes:
            for m in e.events:
                w.writerow([e.episode_id, m.variable, repr(m.timestamp), repr(m.value)])
    with open(paths["outcomes"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(OUTCOME_COLUMNS)
        for e in episodes:
            days, event = e.survival
            w.writerow([e.episode_id, schema.statuses[e.discharge_status], repr(days), int(event)])
    with open(paths["sofa"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SOFA_COLUMNS)
        for e in episodes:
            for h, s in e.sofa:
                w.writerow([e.episode_id, h, s])
    with open(paths["treatment"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*TREATMENT_COLUMNS, "in_hospital_death", *adjuster_names])
        for e in episodes:
            t = e.treatment
            if t is None:
                continue
            w.writerow(
                [
                    e.episode_id,
                    int(t.received_vasopressor),
                    t.first_vasopressor,
                    int(t.map_below_65_within_1h),
                    repr(t.time_to_vasopressor_hours),
                    repr(t.iv_fluid_volume_liters),
                    int(t.chf_flag),
                    int(t.renal_failure_flag),
                    int(t.in_hospital_death),
                    *(repr(t.adjusters[a]) if a in t.adjusters else "" for a in adjuster_names),
                ]
            )
    return paths
