from .io import CohortSchema, LoadReport, ReferentialError, SchemaError, load_cohort, write_cohort
from .model import (
    CohortError,
    CohortSplit,
    Episode,
    Measurement,
    TreatmentRecord,
    canonical_event_order,
    filter_treatment_cohort,
    split_by_patient,
    treatment_exclusion_reason,
)
from .synthetic import (
    SyntheticSpec,
    TreatmentSpec,
    VariableSpec,
    four_blob_spec,
    generate_synthetic_cohort,
    outcome_split_spec,
)

__all__ = [
    "CohortError",
    "CohortSchema",
    "CohortSplit",
    "Episode",
    "LoadReport",
    "Measurement",
    "ReferentialError",
    "SchemaError",
    "SyntheticSpec",
    "TreatmentRecord",
    "TreatmentSpec",
    "VariableSpec",
    "canonical_event_order",
    "filter_treatment_cohort",
    "four_blob_spec",
    "generate_synthetic_cohort",
    "load_cohort",
    "outcome_split_spec",
    "split_by_patient",
    "treatment_exclusion_reason",
    "write_cohort",
]
