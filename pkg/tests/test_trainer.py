import json

import numpy as np
import pytest

from npcnet.clusterop import assign_clusters, clustering_loss
from npcnet.embedding import ConfigError
from npcnet.netcore import autodiff as ad
from npcnet.netcore.autodiff import Parameter, Tensor
from npcnet.pseudotext import VersionMismatchError
from npcnet.trainer import (
    ModelState,
    TrainConfig,
    assign_phenotypes,
    build_model,
    infer_embeddings,
    phenotype_labels,
    pretrain,
    total_loss,
    train,
)

from conftest import make_episode


def _cfg(**kw):
    base = dict(dim=8, hidden=[8], embed_dim=4, n_bins=4, epochs=3, pretrain_epochs=3, batch_size=16, lr=0.01, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _params(model):
    return [p.value.copy() for p in model.parameters()]


def test_total_loss_examples():
    parts = [Tensor(np.array(v)) for v in (0.2, 0.3, 0.5)]
    assert total_loss(*parts, (1, 1, 1)).item() == pytest.approx(1.0)
    assert total_loss(*parts, (1, 0, 0)).item() == pytest.approx(0.2)


def test_doubling_cluster_weight_doubles_its_gradient(rng):
    E = Parameter(rng.normal(size=(5, 3)))
    M = rng.normal(size=(2, 3))
    s = assign_clusters(E.value, M)

    def grad(l2):
        E.zero_grad()
        total_loss(Tensor(np.array(0.0)), clustering_loss(E, M, s), Tensor(np.array(0.0)), (1.0, l2, 0.0)).backward()
        return E.grad.copy()

    np.testing.assert_allclose(grad(1.0), 2 * grad(0.5), rtol=1e-14)


def test_zero_pretrain_epochs_is_noop(small_cohort):
    spec, eps = small_cohort
    model = build_model(eps, _cfg(pretrain_epochs=0), spec.schema().statics)
    before = _params(model)
    assert pretrain(model, eps) == []
    for a, b in zip(before, _params(model)):
        np.testing.assert_array_equal(a, b)


def test_pretrain_loss_decreases(small_cohort):
    spec, eps = small_cohort
    model = build_model(eps, _cfg(pretrain_epochs=20), spec.schema().statics)
    curve = pretrain(model, eps)
    assert curve[-1] < curve[0]


def test_identical_episodes_reconstruct_almost_exactly():
    ep = [make_episode(f"E{i}", events=[("HR", 1.0, 80.0), ("SBP", 2.0, 100.0)], statics={"g": 0}) for i in range(16)]
    model = build_model(ep, _cfg(pretrain_epochs=300, lr=0.01, batch_size=16), {"g": 2})
    curve = pretrain(model, ep)
    assert curve[-1] < 1e-9 * curve[0]


def _run(eps, spec, **kw):
    return train(eps, _cfg(**kw), spec.schema().statics)


def test_reductions_are_bit_reproducible(small_cohort):
    spec, eps = small_cohort
    for lambdas in [dict(lambda_nav=0.0), dict(lambda_cluster=0.0, lambda_nav=0.0), dict()]:
        a, b = _run(eps, spec, **lambdas), _run(eps, spec, **lambdas)
        assert a.history == b.history
        assert a.centroids.M.tobytes() == b.centroids.M.tobytes()
        for x, y in zip(_params(a), _params(b)):
            assert x.tobytes() == y.tobytes()


def test_navigator_changes_training(small_cohort):
    spec, eps = small_cohort
    dcn = _run(eps, spec, lambda_nav=0.0)
    full = _run(eps, spec, lambda_nav=1.0)
    assert dcn.history[-1]["total"] != full.history[-1]["total"]
    assert "navigator" in full.history[-1] and "navigator" not in dcn.history[-1]


def test_single_status_disables_navigator(small_cohort, caplog):
    spec, eps = small_cohort
    alive = [e for e in eps if e.discharge_status == 0]
    model = train(alive, _cfg(lambda_nav=1.0), spec.schema().statics)
    assert model.manifest["navigator_active"] is False
    assert "navigator disabled" in caplog.text


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train([], _cfg(), {})


def test_serialization_roundtrip(small_cohort, tmp_path):
    spec, eps = small_cohort
    model = _run(eps, spec)
    E = infer_embeddings(eps, model)
    model.save(tmp_path / "m" / "model.json")
    loaded = ModelState.load(tmp_path / "m" / "model.json")
    np.testing.assert_allclose(infer_embeddings(eps, loaded), E, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(loaded.centroids.M, model.centroids.M)
    assert loaded.config == model.config
    assert loaded.thresholds == model.thresholds and loaded.vocab == model.vocab


def test_model_version_mismatch(small_cohort, tmp_path):
    spec, eps = small_cohort
    d = build_model(eps, _cfg(), spec.schema().statics).to_dict()
    d["version"] = 42
    with pytest.raises(VersionMismatchError):
        ModelState.from_dict(json.loads(json.dumps(d)))


def test_inference_does_not_refit_thresholds(small_cohort):
    spec, eps = small_cohort
    model = _run(eps[:60], spec)
    before = json.dumps(model.thresholds.to_dict(), sort_keys=True)
    infer_embeddings(eps[60:], model)
    assert json.dumps(model.thresholds.to_dict(), sort_keys=True) == before


def test_reencoding_matches_final_embedding(small_cohort):
    spec, eps = small_cohort
    model = _run(eps, spec)
    np.testing.assert_array_equal(infer_embeddings(eps, model), infer_embeddings(eps, model))


def test_zero_event_episode_embeds_pure_static(small_cohort):
    spec, eps = small_cohort
    model = _run(eps, spec)
    empty = make_episode("X", statics={"gender": 1, "chf": 0})
    got = infer_embeddings([empty], model)[0]
    t = model.tables
    S = t.statics["gender"].value[1] + t.statics["chf"].value[0]
    want = model.net.encode(Tensor((1 - t.w) * S[None, :])).value[0]
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_phenotype_names_follow_median_sofa(small_cohort):
    spec, eps = small_cohort
    model = _run(eps, spec)
    labels = assign_phenotypes(infer_embeddings(eps, model), model.centroids.M)
    medians = {}
    for j in range(4):
        scores = [eps[i].sofa_at(6) for i in np.flatnonzero(labels == j)]
        if scores:
            medians[model.phenotype_names[j]] = np.median(scores)
    ordered = [medians[n] for n in ["α", "β", "γ", "δ"] if n in medians]
    assert ordered == sorted(ordered)
    assert sorted(model.phenotype_names) == sorted(["α", "β", "γ", "δ"])
    assert phenotype_labels(model, labels[:3]) == [model.phenotype_names[j] for j in labels[:3]]


def test_single_cluster_config_gives_one_label(small_cohort):
    spec, eps = small_cohort
    model = _run(eps, spec, k=1)
    labels = assign_phenotypes(infer_embeddings(eps, model), model.centroids.M)
    assert set(labels.tolist()) == {0}
    assert model.phenotype_names == ["α"]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ConfigError):
        TrainConfig(w=1.2)
    with pytest.raises(ConfigError):
        TrainConfig(dim=7)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_nav=-1)
    cfg = TrainConfig(epochs=2)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
