import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from murax.dataset import DatasetIndex, Study
from murax.metrics import (
    MetricError,
    UndefinedMetric,
    aggregate_study,
    cohen_kappa,
    confusion,
    ensemble_probs,
    report_from_probs,
    roc_auc,
)
from oracles import auc_pair_count, kappa_from_confusion


@pytest.mark.parametrize("views,mean,label", [([0.6, 0.8], 0.7, 1), ([0.5], 0.5, 0), ([0.2, 0.4, 0.9], 0.5, 0)])
def test_aggregate_examples(views, mean, label):
    m, lab = aggregate_study(views)
    assert m == pytest.approx(mean, abs=1e-15)
    assert lab == label


def test_aggregate_empty():
    with pytest.raises(MetricError):
        aggregate_study([])


def test_ensemble_examples(rng):
    assert ensemble_probs([[0.2], [0.8]]).tolist() == [0.5]
    one = rng.random(7)
    assert np.array_equal(ensemble_probs([one]), one)
    members = rng.random((4, 9))
    assert np.allclose(ensemble_probs(members), ensemble_probs(members[::-1]), atol=1e-15)
    with pytest.raises(MetricError):
        ensemble_probs([[0.1, 0.2], [0.3]])


def test_kappa_examples():
    pred = [1] * 4 + [0] + [1] * 2 + [0] * 3
    gold = [1] * 4 + [1] + [0] * 2 + [0] * 3
    assert confusion(pred, gold) == {"tp": 4, "fn": 1, "fp": 2, "tn": 3}
    assert cohen_kappa(pred, gold) == pytest.approx(0.4, abs=1e-12)
    assert cohen_kappa([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert cohen_kappa([1, 1, 1, 1], [1, 0, 1, 0]) == 0.0
    assert cohen_kappa([1, 1], [1, 1]) == 1.0
    with pytest.raises(MetricError):
        cohen_kappa([1, 0], [1])


def test_kappa_matches_oracle_random(rng):
    for _ in range(200):
        n = int(rng.integers(1, 60))
        p, g = rng.integers(0, 2, n), rng.integers(0, 2, n)
        k = cohen_kappa(p, g)
        assert abs(k - kappa_from_confusion(p, g)) <= 1e-12
        assert -1 <= k <= 1
        assert k == pytest.approx(cohen_kappa(1 - p, 1 - g), abs=1e-12)


def test_auc_examples():
    assert roc_auc([0.9, 0.4, 0.5, 0.2], [1, 1, 0, 0]) == 0.75
    assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert roc_auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    with pytest.raises(UndefinedMetric):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_matches_pair_count_with_ties(pairs):
    scores = [s / 5 for s, _ in pairs]
    gold = [g for _, g in pairs]
    if len(set(gold)) < 2:
        return
    assert abs(roc_auc(scores, gold) - auc_pair_count(scores, gold)) <= 1e-12


def _index(labels, views):
    studies = [
        Study(f"patient{i:05d}", "HAND" if i % 2 else "WRIST", "study1", tuple(f"/v/{i}/{j}" for j in range(v)), lab)
        for i, (lab, v) in enumerate(zip(labels, views))
    ]
    return DatasetIndex("valid", studies)


def test_oracle_model_report():
    ix = _index([1, 0, 1, 0], [2, 1, 3, 1])
    gold_views = [lab for _, lab, _ in ix.views()]
    r = report_from_probs(ix, [np.array(gold_views, dtype=float)])
    assert (r.overall.kappa, r.overall.auc, r.overall.accuracy) == (1.0, 1.0, 1.0)
    assert r.view_accuracy == 1.0
    assert set(r.per_body_part) == {"HAND", "WRIST"}


def test_constant_half_model_report():
    ix = _index([1, 0, 0, 0, 1], [1, 2, 1, 1, 1])
    r = report_from_probs(ix, [np.full(ix.n_views, 0.5)])
    assert r.overall.accuracy == pytest.approx(3 / 5)
    assert r.overall.kappa == 0.0
    assert r.overall.auc == 0.5


def test_report_flags_undefined_auc_and_serializes():
    ix = _index([1, 1, 0], [1, 1, 1])
    r = report_from_probs(ix, [np.array([0.9, 0.7, 0.1])], "fp", ["abc"])
    assert r.per_body_part["HAND"].auc is None
    assert "HAND.auc" in r.undefined()
    d = json.loads(r.to_json())
    assert d["checkpoint_hashes"] == ["abc"] and d["overall"]["auc"] == 1.0


def test_view_count_mismatch():
    with pytest.raises(MetricError):
        report_from_probs(_index([1, 0], [1, 1]), [np.zeros(3)])
