"""Smoke tests for the python bindings: a full weighted analysis round trip
on the bundled demo data, plus classifier and harness basics."""

import math
import os

import numpy as np
import pytest

import crfrail

DATA = os.path.join(os.path.dirname(__file__), "..", "..", "data")


@pytest.fixture(scope="module")
def demo():
    train = crfrail.load_dataset(os.path.join(DATA, "demo_train.csv"), 2)
    main = crfrail.load_dataset(os.path.join(DATA, "demo_main.csv"), 2)
    return train, main


def test_dataset_loading(demo):
    train, main = demo
    assert train.num_causes == 2
    assert train.complete_types()
    assert not main.complete_types()
    unit = main.unit(0)
    assert unit["cluster_id"] == 1
    assert unit["event_type"] is None

    with pytest.raises(crfrail.DataError):
        crfrail.load_dataset(os.path.join(DATA, "no_such_file.csv"), 2)


def test_classifier_round_trip(demo):
    train, main = demo
    model = crfrail.fit_multinomial(train, ridge=1e-4)
    probs = crfrail.predict_probabilities(model, main)
    p = probs.probs
    assert p.shape[1] == 2
    assert np.allclose(p.sum(axis=1), 1.0)
    positions, labels = crfrail.impute_types(probs)
    assert len(positions) == p.shape[0]
    assert set(labels) <= {1, 2}

    restored = crfrail.MultinomialModel.from_json(model.to_json())
    w = np.array([1.5])
    assert np.allclose(restored.probabilities(w), model.probabilities(w))


def test_weighted_fit(demo):
    train, main = demo
    model = crfrail.fit_multinomial(train, ridge=1e-4)
    probs = crfrail.predict_probabilities(model, main)
    weights = crfrail.effective_weights(main, "weighted", probs)
    assert weights.shape == (main.num_units, 2)

    fit = crfrail.fit(main, weights)
    assert fit.converged
    assert fit.beta.shape == (2, 1)
    assert all(abs(b) < 2.0 for b in fit.beta.ravel())
    se = fit.se_beta_hessian()
    assert np.all(se > 0)
    assert np.all(np.isfinite(fit.se_beta_sandwich()))
    assert fit.sigma2 >= 0.0
    assert -1.0 < fit.rho < 1.0
    assert math.isfinite(fit.pplog)


def test_objective_evaluates(demo):
    train, main = demo
    weights = crfrail.effective_weights(
        crfrail.load_dataset(os.path.join(DATA, "demo_main_complete.csv"), 2), "complete"
    )
    data = crfrail.load_dataset(os.path.join(DATA, "demo_main_complete.csv"), 2)
    beta = np.zeros((2, 1))
    v = np.zeros(2 * data.num_clusters)
    val = crfrail.weighted_ppll(data, weights, beta, v, 0.1, 0.0)
    assert math.isfinite(val) and val < 0


def test_run_study_small():
    config = """{
      "num_clusters": 60, "training_size": 40, "replicates": 2,
      "seed": 7, "method": "weighted"
    }"""
    out = crfrail.run_study(config)
    assert out["replicates"] == 2
    assert out["converged"] + out["failed"] == 2
    assert len(out["parameters"]) == 2
    assert {"percent_bias", "ese", "coverage"} <= set(out["parameters"][0])
