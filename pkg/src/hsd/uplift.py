"""T-, S- and X-learners over the probability learners.

Models train on uniform or HS cohorts alike; no reweighting is needed because
the target is conditional on x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataError, PopulationFrame, SchemaError, SeedSpec, ValidationError, as_seed
from .learners import FittedOutcomeModel, OutcomeLearnerSpec, fit, fit_regressor, predict_proba

TREATMENT_FEATURE = "__w__"


@dataclass(frozen=True, eq=False)
class UpliftModel:
    meta_kind: str
    components: dict
    feature_names: tuple[str, ...]
    p: float | None = None

    def predict(self, features) -> np.ndarray:
        return predict_cate(self, features)


def _arms(frame: PopulationFrame):
    frame.require("outcome", "treatment")
    t = frame.treatment == 1
    c = ~t
    if not t.any() or not c.any():
        raise DataError("uplift training needs treated and control rows")
    return t, c


def fit_t_learner(frame: PopulationFrame, spec: OutcomeLearnerSpec, seed: SeedSpec | int | None = None) -> UpliftModel:
    t, c = _arms(frame)
    seed = as_seed(seed, "t_learner")
    X, y, names = frame.features, frame.outcome, frame.feature_names
    mu1 = fit(spec, X[t], y[t], seed.child("mu1"), names)
    mu0 = fit(spec, X[c], y[c], seed.child("mu0"), names)
    return UpliftModel("T", {"mu0": mu0, "mu1": mu1}, names)


def fit_s_learner(frame: PopulationFrame, spec: OutcomeLearnerSpec, seed: SeedSpec | int | None = None) -> UpliftModel:
    frame.require("outcome", "treatment")
    seed = as_seed(seed, "s_learner")
    X = np.column_stack([frame.features, frame.treatment.astype(float)])
    mu = fit(spec, X, frame.outcome, seed.child("mu"), frame.feature_names + (TREATMENT_FEATURE,))
    return UpliftModel("S", {"mu": mu}, frame.feature_names)


def fit_x_learner(
    frame: PopulationFrame,
    spec: OutcomeLearnerSpec,
    p: float = 0.5,
    seed: SeedSpec | int | None = None,
) -> UpliftModel:
    """Two-stage X-learner; predictions are p * tau1(x) + (1 - p) * tau0(x)."""
    if not 0 <= p <= 1:
        raise ValidationError("X-learner weight p must lie in [0, 1]")
    t, c = _arms(frame)
    seed = as_seed(seed, "x_learner")
    X, y, names = frame.features, frame.outcome.astype(float), frame.feature_names
    mu1 = fit(spec, X[t], y[t], seed.child("mu1"), names)
    mu0 = fit(spec, X[c], y[c], seed.child("mu0"), names)
    d1 = y[t] - predict_proba(mu0, X[t])
    d0 = predict_proba(mu1, X[c]) - y[c]
    tau1 = fit_regressor(spec, X[t], d1, seed.child("tau1"), names)
    tau0 = fit_regressor(spec, X[c], d0, seed.child("tau0"), names)
    return UpliftModel("X", {"mu0": mu0, "mu1": mu1, "tau1": tau1, "tau0": tau0}, names, p)


META_FITTERS = {"T": fit_t_learner, "S": fit_s_learner, "X": fit_x_learner}


def fit_uplift(meta: str, frame: PopulationFrame, spec: OutcomeLearnerSpec, seed=None, p: float = 0.5) -> UpliftModel:
    meta = meta.upper()
    if meta == "X":
        return fit_x_learner(frame, spec, p, seed)
    if meta not in META_FITTERS:
        raise ValidationError(f"unknown meta-learner {meta!r}")
    return META_FITTERS[meta](frame, spec, seed)


def predict_cate(model: UpliftModel, features) -> np.ndarray:
    """Per-row CATE scores."""
    if isinstance(features, PopulationFrame):
        if features.feature_names != model.feature_names:
            raise SchemaError(f"feature names {features.feature_names} do not match {model.feature_names}")
        X = features.features
    else:
        X = np.asarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(model.feature_names):
            raise SchemaError(f"expected {len(model.feature_names)} feature columns")
    comp = model.components
    if model.meta_kind == "T":
        return predict_proba(comp["mu1"], X) - predict_proba(comp["mu0"], X)
    if model.meta_kind == "S":
        ones = np.column_stack([X, np.ones(X.shape[0])])
        zeros = np.column_stack([X, np.zeros(X.shape[0])])
        return predict_proba(comp["mu"], ones) - predict_proba(comp["mu"], zeros)
    if model.meta_kind == "X":
        p = model.p
        out = p * predict_proba(comp["tau1"], X)
        if p < 1:
            out = out + (1 - p) * predict_proba(comp["tau0"], X)
        return out
    raise ValidationError(f"unknown meta kind {model.meta_kind!r}")
