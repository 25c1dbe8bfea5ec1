import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from npcnet.cohort import Episode, Measurement, four_blob_spec, generate_synthetic_cohort

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_episode(eid="E1", pid=None, events=(), statics=None, status=0, sofa=(), survival=(365.0, False), **kw):
    return Episode(
        episode_id=eid,
        patient_id=pid or eid,
        statics=statics if statics is not None else {},
        events=tuple(Measurement(*e) for e in events),
        discharge_status=status,
        sofa=tuple(sofa),
        survival=survival,
        **kw,
    )


@pytest.fixture(scope="session")
def small_cohort():
    spec = four_blob_spec(n_patients=80)
    return spec, generate_synthetic_cohort(spec, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
