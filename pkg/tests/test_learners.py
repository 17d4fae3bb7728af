import warnings

import numpy as np
import pytest
from scipy.special import expit

from hsd.data import DataError, PopulationFrame, SchemaError, SeedSpec, ValidationError
from hsd.learners import (
    FittedOutcomeModel,
    OutcomeLearnerSpec,
    cross_fit_predictions,
    fit,
    fit_regressor,
    fold_assignment,
    predict_proba,
)
from hsd.simulation import ScenarioSpec, generate_scenario

GLM = OutcomeLearnerSpec(kind="glm")
SMALL_FOREST = OutcomeLearnerSpec(n_trees=20, max_depth=6, min_leaf=20)


@pytest.fixture(scope="module")
def sigmoid_data():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((50_000, 1))
    y = (rng.random(50_000) < expit(2 * x[:, 0])).astype(int)
    return x, y


def test_glm_recovers_coefficient(sigmoid_data):
    x, y = sigmoid_data
    model = fit(GLM, x, y, 0)
    assert model.converged
    assert abs(model.state[1] - 2.0) < 0.1
    assert abs(predict_proba(model, np.zeros((1, 1)))[0] - 0.5) < 0.05


def test_glm_zero_coefficients_predict_half():
    model = FittedOutcomeModel(GLM, ("a", "b"), np.zeros(3))
    np.testing.assert_array_equal(predict_proba(model, np.random.default_rng(0).normal(size=(5, 2))), 0.5)


def test_glm_degenerate_outcome_raises():
    with pytest.raises(ValidationError):
        fit(GLM, np.ones((10, 1)), np.zeros(10))


def test_glm_shrinkage_monotone(sigmoid_data):
    x, y = sigmoid_data
    rng = np.random.default_rng(1)
    X = np.column_stack([x[:5000, 0], rng.standard_normal(5000), rng.standard_normal(5000)])
    norms = [np.linalg.norm(fit(OutcomeLearnerSpec(kind="glm", l2=l2), X, y[:5000]).state[1:]) for l2 in (0.0, 100.0, 10_000.0)]
    assert norms[0] >= norms[1] >= norms[2]


def test_glm_reports_non_convergence(sigmoid_data):
    x, y = sigmoid_data
    with pytest.warns(RuntimeWarning):
        model = fit(OutcomeLearnerSpec(kind="glm", max_iter=1), x, y)
    assert not model.converged and model.n_iter == 1


def test_stump_has_two_values():
    x = np.linspace(-1, 1, 200)[:, None]
    y = (x[:, 0] > 0).astype(int)
    model = fit(OutcomeLearnerSpec(n_trees=1, max_depth=1, min_leaf=1), x, y, 3)
    assert np.unique(predict_proba(model, x)).size == 2


def test_constant_forest_predicts_training_mean():
    with pytest.warns(RuntimeWarning):
        model = fit(OutcomeLearnerSpec(), np.random.default_rng(0).normal(size=(30, 2)), np.ones(30))
    assert model.degenerate
    np.testing.assert_array_equal(predict_proba(model, np.zeros((4, 2))), 1.0)


def test_forest_is_bounded_and_deterministic():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(2000, 3))
    y = (rng.random(2000) < expit(X[:, 0])).astype(int)
    a = predict_proba(fit(SMALL_FOREST, X, y, SeedSpec(9)), X)
    b = predict_proba(fit(SMALL_FOREST, X, y, SeedSpec(9)), X)
    c = predict_proba(fit(SMALL_FOREST, X, y, SeedSpec(10)), X)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_feature_name_mismatch():
    frame = PopulationFrame(np.zeros((4, 2)), ("a", "b"))
    model = fit(GLM, frame, [0, 1, 0, 1])
    with pytest.raises(SchemaError):
        predict_proba(model, PopulationFrame(np.zeros((4, 2)), ("a", "c")))
    with pytest.raises(SchemaError):
        predict_proba(model, np.zeros((4, 3)))


def test_spec_validation():
    for bad in (dict(n_trees=0), dict(max_depth=0), dict(feature_fraction=1.5), dict(row_fraction=0.0), dict(kind="svm")):
        with pytest.raises(ValidationError):
            OutcomeLearnerSpec(**bad)
    spec = OutcomeLearnerSpec.from_config({"kind": "glm", "params": {"l2": 2.0}})
    assert OutcomeLearnerSpec.from_config(spec.to_config()) == spec
    with pytest.raises(ValidationError):
        OutcomeLearnerSpec.from_config({"params": {"trees": 3}})


def test_regressor_glm_is_least_squares():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 2))
    t = 1.5 + X @ np.array([0.3, -2.0])
    model = fit_regressor(OutcomeLearnerSpec(kind="glm", l2=0.0), X, t)
    np.testing.assert_allclose(predict_proba(model, X), t, atol=1e-8)


def test_folds_balanced_by_arm():
    w = np.r_[np.ones(37), np.zeros(63)].astype(int)
    folds = fold_assignment(w, 5, 0)
    for k in range(5):
        assert abs((folds[w == 1] == k).sum() - 37 / 5) < 1
        assert abs((folds[w == 0] == k).sum() - 63 / 5) < 1


def test_cross_fit_out_of_fold(monkeypatch):
    rng = np.random.default_rng(4)
    frame = PopulationFrame(rng.normal(size=(100, 2)), ("a", "b"), rng.integers(0, 2, 100), rng.integers(0, 2, 100))
    import hsd.learners as L

    seen = []
    real_fit = L.fit

    def spy(spec, X, y, seed=None, names=None):
        seen.append({tuple(r) for r in np.asarray(X)})
        return real_fit(spec, X, y, seed, names)

    monkeypatch.setattr(L, "fit", spy)
    mu0, mu1, folds = cross_fit_predictions(GLM, frame, 2, True, 0, return_folds=True)
    assert len(seen) == 4
    for k in range(2):
        held = {tuple(r) for r in frame.features[folds == k]}
        for train_rows in seen[2 * k: 2 * k + 2]:
            assert not held & train_rows
    assert np.isfinite(mu0).all() and np.isfinite(mu1).all()


def test_cross_fit_constant_controls():
    rng = np.random.default_rng(6)
    w = rng.integers(0, 2, 200)
    y = np.where(w == 1, rng.integers(0, 2, 200), 0)
    frame = PopulationFrame(rng.normal(size=(200, 2)), ("a", "b"), y, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu0, _ = cross_fit_predictions(SMALL_FOREST, frame, 2, True, 1)
    np.testing.assert_array_equal(mu0, 0.0)


def test_cross_fit_needs_both_arms():
    frame = PopulationFrame(np.zeros((10, 1)), ("a",), np.r_[np.zeros(5), np.ones(5)], np.zeros(10))
    with pytest.raises(DataError, match="fold"):
        cross_fit_predictions(GLM, frame, 2, True, 0)
    with pytest.raises(ValidationError):
        cross_fit_predictions(GLM, frame, 1, True, 0)


def test_cross_fit_tracks_truth():
    frame, truth = generate_scenario(ScenarioSpec(1, 20_000, 10, 0.5, 3))
    mu0, _ = cross_fit_predictions(OutcomeLearnerSpec(n_trees=50), frame, 2, True, 0)
    assert np.corrcoef(mu0, truth.mu0)[0, 1] > 0.5
