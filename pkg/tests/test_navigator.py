import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from npcnet.navigator import (
    NavigatorHead,
    dist_loss,
    inverse_frequency_weights,
    navigator_loss,
    predict_status,
    prob_loss,
    sample_triplets,
)
from npcnet.netcore import autodiff as ad
from npcnet.netcore.autodiff import Parameter, Tensor
from npcnet.netcore.gradcheck import grad_check

from oracles import class_summed_cross_entropy, softmax_row, triplet_hinge


def _head(d=3, c=2, **kw):
    return NavigatorHead(d, c, rng=np.random.default_rng(0), **kw)


def test_zero_head_gives_uniform_rows(rng):
    h = _head()
    h.W.value[...] = 0
    p = predict_status(Tensor(rng.normal(size=(4, 3))), h).value
    np.testing.assert_allclose(p, 0.5)


def test_log_three_bias_gives_three_to_one():
    h = _head()
    h.W.value[...] = 0
    h.b.value[...] = [math.log(3), 0.0]
    p = predict_status(Tensor(np.ones((2, 3))), h).value
    np.testing.assert_allclose(p, [[0.75, 0.25]] * 2, atol=1e-15)


def test_class_permutation_is_equivariant(rng):
    h = _head(c=3)
    h.b.value[...] = rng.normal(size=3)
    E = Tensor(rng.normal(size=(5, 3)))
    p = predict_status(E, h).value
    perm = [2, 0, 1]
    h.W.value[...] = h.W.value[:, perm]
    h.b.value[...] = h.b.value[perm]
    np.testing.assert_allclose(predict_status(E, h).value, p[:, perm], atol=1e-15)


@pytest.mark.parametrize("c", [2, 3])
def test_zero_gamma_matches_cross_entropy_oracle(rng, c):
    z = rng.normal(size=(20, c)) * 3
    y = rng.integers(0, c, size=20)
    p = np.array([softmax_row(list(r)) for r in z])
    got = prob_loss(Tensor(p), y, np.ones(c), gamma=0.0).item()
    assert got == pytest.approx(class_summed_cross_entropy(p.tolist(), y.tolist()), abs=1e-10)


def test_confident_correct_limit_is_near_zero():
    p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert prob_loss(p, [0, 1], [1.0, 1.0], gamma=2.0).item() < 1e-6


def test_larger_gamma_downweights_confident_sample():
    p = Tensor(np.array([[0.9, 0.1]]))
    losses = [prob_loss(p, [0], [1, 1], g).item() for g in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_class_weights_scale_terms():
    p = Tensor(np.array([[0.7, 0.3]]))
    base = prob_loss(p, [0], [1, 1], 0.0).item()
    doubled = prob_loss(p, [0], [2, 2], 0.0).item()
    assert doubled == pytest.approx(2 * base)


def test_inverse_frequency_weights_mean_one():
    w = inverse_frequency_weights([0, 0, 0, 1], 2)
    assert w.mean() == pytest.approx(1.0)
    assert w[1] / w[0] == pytest.approx(3.0)


def test_forced_triplet_choice():
    triplets, skipped = sample_triplets([0, 0, 1], [0], np.random.default_rng(0))
    assert skipped == 0
    assert (triplets[0].positive, triplets[0].negative) == (1, 2)


def test_single_status_yields_no_triplets(caplog):
    triplets, skipped = sample_triplets([1, 1, 1], [0, 1, 2], np.random.default_rng(0))
    assert triplets == [] and skipped == 3
    assert "skipped" in caplog.text


def test_triplet_invariants_and_determinism(rng):
    statuses = rng.integers(0, 2, size=40)
    anchors = list(range(40))
    a, _ = sample_triplets(statuses, anchors, np.random.default_rng(9))
    b, _ = sample_triplets(statuses, anchors, np.random.default_rng(9))
    assert a == b
    for t in a:
        assert len({t.anchor, t.positive, t.negative}) == 3
        assert statuses[t.anchor] == statuses[t.positive] != statuses[t.negative]


def test_positive_pick_is_uniform():
    statuses = np.array([0] * 6 + [1] * 6)
    picks = []
    gen = np.random.default_rng(2024)
    for _ in range(1000):
        (t,), _ = sample_triplets(statuses, [0], gen)
        picks.append(t.positive)
    counts = np.bincount(picks, minlength=6)[1:6]
    assert stats.chisquare(counts).pvalue > 0.01


def _triple(a, p, n):
    return Tensor(np.array([a])), Tensor(np.array([p])), Tensor(np.array([n]))


@pytest.mark.parametrize(
    "d_ap, d_an, margin, want",
    [(1.0, 1.0, 0.7, 0.7), (0.5, 2.0, 1.0, 0.0), (1.2, 0.3, 0.5, 1.4)],
)
def test_distance_examples(d_ap, d_an, margin, want):
    a, p, n = _triple([0.0, 0.0], [d_ap, 0.0], [0.0, d_an])
    assert dist_loss(a, p, n, margin).item() == pytest.approx(want, abs=1e-15)


def test_distance_matches_oracle_on_random_triples(rng):
    A, P, N = (rng.normal(size=(1000, 4)) for _ in range(3))
    margins = rng.uniform(0.1, 2.0, size=1000)
    for i in range(1000):
        got = dist_loss(*_triple(A[i], P[i], N[i]), margins[i]).item()
        assert abs(got - triplet_hinge(A[i], P[i], N[i], margins[i])) <= 1e-12


@given(
    arrays(np.float64, (3, 3), elements=st.floats(-5, 5)),
    st.floats(0.01, 3.0),
)
def test_distance_loss_nonnegative_and_zero_iff_satisfied(x, margin):
    a, p, n = x
    loss = dist_loss(*_triple(a, p, n), margin).item()
    assert loss >= 0
    satisfied = np.linalg.norm(a - p) + margin <= np.linalg.norm(a - n)
    assert (loss == 0) == satisfied or abs(np.linalg.norm(a - p) + margin - np.linalg.norm(a - n)) < 1e-12


def test_distance_gradient_away_from_kink(rng):
    for _ in range(10):
        a, p, n = (Parameter(rng.normal(size=(1, 3))) for _ in range(3))
        gap = triplet_hinge(a.value[0], p.value[0], n.value[0], 1.0)
        if abs(np.linalg.norm(a.value - p.value) - np.linalg.norm(a.value - n.value) + 1.0) < 1e-3 or gap == 0:
            continue
        report = grad_check(lambda: dist_loss(a, p, n, 1.0), [a, p, n], h=1e-5, tol=1e-4)
        assert report.passed, str(report)


def test_navigator_combination():
    assert navigator_loss(Tensor(np.array(0.3)), Tensor(np.array(0.7)), 1, 1).item() == pytest.approx(1.0)
    assert navigator_loss(Tensor(np.array(0.3)), Tensor(np.array(0.7)), 1, 0).item() == pytest.approx(0.3)


def test_scaling_kappas_scales_gradients(rng):
    E = Parameter(rng.normal(size=(4, 3)))
    h = _head()
    y = [0, 1, 0, 1]

    def grad(t):
        E.zero_grad()
        L = prob_loss(predict_status(E, h), y, [1, 1], 2.0)
        D = dist_loss(ad.gather(E, np.array([0])), ad.gather(E, np.array([2])), ad.gather(E, np.array([1])), 5.0)
        navigator_loss(L, D, 1.0 * t, 0.5 * t).backward()
        return E.grad.copy()

    np.testing.assert_allclose(grad(3.0), 3.0 * grad(1.0), rtol=1e-12)


def test_invalid_head_settings():
    with pytest.raises(ValueError):
        _head(margin=0.0)
    with pytest.raises(ValueError):
        _head(gamma=-1.0)
