import numpy as np
import pytest
from scipy import stats

from npcnet.cohort import CohortError, SyntheticSpec, VariableSpec, four_blob_spec, generate_synthetic_cohort, outcome_split_spec


def _values_by_cluster(eps, variable):
    out = {}
    for e in eps:
        out.setdefault(e.planted_label, []).extend(m.value for m in e.events if m.variable == variable)
    return out


def test_four_blob_shape_and_means():
    spec = four_blob_spec(400)
    eps = generate_synthetic_cohort(spec, 1)
    assert len(eps) == 400
    assert {e.planted_label for e in eps} == {0, 1, 2, 3}
    for name, v in spec.variables.items():
        for c, vals in _values_by_cluster(eps, name).items():
            se = v.sd / np.sqrt(len(vals))
            assert abs(np.mean(vals) - v.means[c]) < 3 * se + 1e-12, (name, c)


def test_deterministic_per_seed():
    spec = four_blob_spec(30)
    assert generate_synthetic_cohort(spec, 3) == generate_synthetic_cohort(spec, 3)


def test_other_seed_changes_values_not_marginals():
    spec = four_blob_spec(300)
    a = _values_by_cluster(generate_synthetic_cohort(spec, 1), "HR")
    b = _values_by_cluster(generate_synthetic_cohort(spec, 2), "HR")
    assert a[0][:5] != b[0][:5]
    # within a planted cluster the two draws share one distribution
    for c in range(4):
        assert stats.ks_2samp(a[c], b[c]).pvalue > 0.001, c


def test_identical_means_leave_labels_uninformative():
    from sklearn.metrics import adjusted_rand_score

    spec = four_blob_spec(200, separation=0.0)
    eps = generate_synthetic_cohort(spec, 0)
    hr_mean = np.array([np.mean([m.value for m in e.events if m.variable == "HR"] or [0.0]) for e in eps])
    guess = np.digitize(hr_mean, np.quantile(hr_mean, [0.25, 0.5, 0.75]))
    assert abs(adjusted_rand_score([e.planted_label for e in eps], guess)) < 0.05


def test_k_below_two_rejected():
    spec = SyntheticSpec(n_patients=5, variables={"HR": VariableSpec([1.0], 1.0, 0, 10)}, mortality=[0.1], sofa6_mean=[1], sofa_slope=[0])
    with pytest.raises(CohortError):
        generate_synthetic_cohort(spec, 0)


def test_outcome_split_mortality_follows_outcome_axis():
    eps = generate_synthetic_cohort(outcome_split_spec(600), 0)
    dead = {0: [], 1: []}
    for e in eps:
        dead[e.planted_label % 2].append(e.discharge_status)
    assert np.mean(dead[1]) - np.mean(dead[0]) > 0.35


def test_planted_label_never_in_statics():
    eps = generate_synthetic_cohort(four_blob_spec(20), 0)
    assert all(set(e.statics) == {"gender", "chf"} for e in eps)
