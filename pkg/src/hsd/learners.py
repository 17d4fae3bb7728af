"""Binary-outcome probability learners behind one interface.

Two kinds are supported:

* ``glm`` -- L2-penalised logistic regression fit by iteratively reweighted
  least squares (IRLS). The intercept is not penalised.
* ``random_forest`` -- bagged CART trees on the Gini criterion; the predicted
  probability is the mean over trees of the leaf's positive-class frequency.

Each kind also has a regression variant (ridge least squares, squared-error
forest) used for the second stage of the X-learner, whose targets are not
binary.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Any, Mapping

import numpy as np
from scipy.special import expit
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from .data import (
    DataError,
    PopulationFrame,
    SchemaError,
    SeedSpec,
    ValidationError,
    as_seed,
)

KINDS = ("glm", "random_forest")


@dataclass(frozen=True)
class OutcomeLearnerSpec:
    kind: str = "random_forest"
    # glm
    l2: float = 1e-6
    max_iter: int = 100
    tol: float = 1e-8
    # random_forest
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 25
    feature_fraction: float | None = None  # None -> sqrt(d)/d
    row_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.l2 < 0:
            raise ValidationError("l2 penalty must be non-negative")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValidationError("max_iter must be >= 1 and tol > 0")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValidationError("tree count, max depth and min leaf size must be >= 1")
        for name in ("feature_fraction", "row_fraction"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise ValidationError(f"{name} must lie in (0, 1]")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any] | None) -> "OutcomeLearnerSpec":
        """Build from the ``{kind, params}`` block of a JSON config."""
        if cfg is None:
            return cls()
        if isinstance(cfg, OutcomeLearnerSpec):
            return cfg
        params = dict(cfg.get("params", {}))
        unknown = set(params) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown learner parameter(s): {sorted(unknown)}")
        return cls(kind=cfg.get("kind", "random_forest"), **params)

    def to_config(self) -> dict:
        params = asdict(self)
        kind = params.pop("kind")
        return {"kind": kind, "params": params}


@dataclass(frozen=True, eq=False)
class FittedOutcomeModel:
    """Fitted learner. ``regression`` marks the squared-error variants."""

    spec: OutcomeLearnerSpec
    feature_names: tuple[str, ...]
    state: Any
    regression: bool = False
    converged: bool = True
    n_iter: int = 0
    degenerate: bool = False

    def predict(self, features, feature_names=None) -> np.ndarray:
        return predict_proba(self, features, feature_names)


# --------------------------------------------------------------------------- glm


def _irls(X: np.ndarray, y: np.ndarray, l2: float, max_iter: int, tol: float):
    n, d = X.shape
    Z = np.column_stack([np.ones(n), X])
    beta = np.zeros(d + 1)
    penalty = np.full(d + 1, l2)
    penalty[0] = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = Z @ beta
        prob = expit(eta)
        weight = np.clip(prob * (1 - prob), 1e-10, None)
        grad = Z.T @ (y - prob) - penalty * beta
        hess = (Z * weight[:, None]).T @ Z + np.diag(penalty)
        hess[np.diag_indices_from(hess)] += 1e-12
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    return beta, converged, it


def _ridge(X: np.ndarray, y: np.ndarray, l2: float):
    n, d = X.shape
    Z = np.column_stack([np.ones(n), X])
    penalty = np.full(d + 1, l2)
    penalty[0] = 0.0
    A = Z.T @ Z + np.diag(penalty)
    A[np.diag_indices_from(A)] += 1e-12
    return np.linalg.solve(A, Z.T @ y)


# --------------------------------------------------------------------------- forest


def _forest_kwargs(spec: OutcomeLearnerSpec, n_features: int, seed: int) -> dict:
    if spec.feature_fraction is None:
        max_features = max(1, int(math.sqrt(n_features))) / n_features
    else:
        max_features = spec.feature_fraction
    return dict(
        n_estimators=spec.n_trees,
        max_depth=spec.max_depth,
        min_samples_leaf=spec.min_leaf,
        max_features=max_features,
        bootstrap=True,
        max_samples=None if spec.row_fraction >= 1 else spec.row_fraction,
        random_state=seed,
        n_jobs=1,
    )


# --------------------------------------------------------------------------- api


def _as_matrix(features, feature_names=None) -> tuple[np.ndarray, tuple[str, ...] | None]:
    if isinstance(features, PopulationFrame):
        return features.features, features.feature_names
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = None if feature_names is None else tuple(feature_names)
    return X, names


def fit(
    spec: OutcomeLearnerSpec,
    features,
    outcome,
    seed: SeedSpec | int | None = None,
    feature_names=None,
) -> FittedOutcomeModel:
    """Fit a probability model for a binary outcome."""
    X, names = _as_matrix(features, feature_names)
    if names is None:
        names = tuple(f"f{j}" for j in range(X.shape[1]))
    y = np.asarray(outcome, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValidationError(f"outcome length {y.shape} does not match {X.shape[0]} rows")
    if X.shape[0] == 0:
        raise ValidationError("cannot fit on zero rows")
    if ((y != 0) & (y != 1)).any():
        raise ValidationError("outcome must be 0/1")
    seed = as_seed(seed, "fit")
    degenerate = y.min() == y.max()
    if spec.kind == "glm":
        if degenerate:
            raise ValidationError("glm needs at least one positive and one negative outcome")
        beta, converged, n_iter = _irls(X, y, spec.l2, spec.max_iter, spec.tol)
        if not converged:
            warnings.warn(f"IRLS stopped after {n_iter} iterations without converging", RuntimeWarning)
        return FittedOutcomeModel(spec, names, beta, converged=converged, n_iter=n_iter)
    if degenerate:
        warnings.warn("constant outcome: random forest degenerates to a constant predictor", RuntimeWarning)
        return FittedOutcomeModel(spec, names, float(y[0]), degenerate=True)
    forest = RandomForestClassifier(criterion="gini", **_forest_kwargs(spec, X.shape[1], seed.int_seed()))
    forest.fit(X, y.astype(int))
    return FittedOutcomeModel(spec, names, forest)


def fit_regressor(
    spec: OutcomeLearnerSpec,
    features,
    target,
    seed: SeedSpec | int | None = None,
    feature_names=None,
) -> FittedOutcomeModel:
    """Regression variant for real-valued targets (ridge / squared-error forest)."""
    X, names = _as_matrix(features, feature_names)
    if names is None:
        names = tuple(f"f{j}" for j in range(X.shape[1]))
    t = np.asarray(target, dtype=float)
    if t.shape != (X.shape[0],) or X.shape[0] == 0:
        raise ValidationError("target must be a non-empty vector matching the rows")
    seed = as_seed(seed, "fit")
    if spec.kind == "glm":
        return FittedOutcomeModel(spec, names, _ridge(X, t, spec.l2), regression=True)
    if t.min() == t.max():
        return FittedOutcomeModel(spec, names, float(t[0]), regression=True, degenerate=True)
    forest = RandomForestRegressor(criterion="squared_error", **_forest_kwargs(spec, X.shape[1], seed.int_seed()))
    forest.fit(X, t)
    return FittedOutcomeModel(spec, names, forest, regression=True)


def predict_proba(model: FittedOutcomeModel, features, feature_names=None) -> np.ndarray:
    """One prediction per row; probabilities in [0, 1] for classification models."""
    X, names = _as_matrix(features, feature_names)
    if names is not None and names != model.feature_names:
        raise SchemaError(f"feature names {names} do not match training names {model.feature_names}")
    if X.shape[1] != len(model.feature_names):
        raise SchemaError(f"expected {len(model.feature_names)} feature columns, got {X.shape[1]}")
    if model.degenerate:
        out = np.full(X.shape[0], model.state, dtype=float)
    elif model.spec.kind == "glm":
        eta = model.state[0] + X @ model.state[1:]
        out = eta if model.regression else expit(eta)
    elif model.regression:
        out = model.state.predict(X)
    else:
        out = model.state.predict_proba(X)[:, 1]
    if not model.regression:
        out = np.clip(out, 0.0, 1.0)
    return out


# --------------------------------------------------------------------------- cross-fitting


def fold_assignment(treatment, n_folds: int, seed: SeedSpec | int | None) -> np.ndarray:
    """Random fold labels, balanced within each treatment arm.

    Arms are dealt round-robin after shuffling, so every fold gets
    (as nearly as possible) the same number of treated and control rows.
    """
    w = np.asarray(treatment)
    rng = as_seed(seed, "folds").rng()
    folds = np.empty(w.shape[0], dtype=np.int64)
    offset = 0
    for arm in (1, 0):
        idx = np.flatnonzero(w == arm)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (np.arange(idx.size) + offset) % n_folds
        offset += idx.size
    return folds


def cross_fit_predictions(
    spec: OutcomeLearnerSpec,
    frame: PopulationFrame,
    folds: int = 5,
    per_arm: bool = True,
    seed: SeedSpec | int | None = None,
    return_folds: bool = False,
):
    """Out-of-fold predictions of the control and treated outcome models.

    For fold k, models are trained on every row outside k and predict on k.
    With ``per_arm`` the control model sees only control rows and the treated
    model only treated rows; otherwise a single pooled model serves both.
    """
    if folds < 2:
        raise ValidationError("cross-fitting needs at least 2 folds")
    frame.require("outcome")
    if per_arm:
        frame.require("treatment")
    seed = as_seed(seed, "crossfit")
    n = frame.n_rows
    w = frame.treatment if frame.treatment is not None else np.zeros(n, dtype=np.int8)
    fold_of = fold_assignment(w, folds, seed.child("assign"))
    X, y = frame.features, frame.outcome
    mu0 = np.empty(n)
    mu1 = np.empty(n)
    for k in range(folds):
        test = fold_of == k
        train = ~test
        if not test.any():
            continue
        if per_arm:
            tr0 = train & (w == 0)
            tr1 = train & (w == 1)
            if not tr0.any() or not tr1.any():
                raise DataError(f"fold {k}: training complement lacks a treatment arm")
            m0 = fit(spec, X[tr0], y[tr0], seed.child(f"k{k}/mu0"), frame.feature_names)
            m1 = fit(spec, X[tr1], y[tr1], seed.child(f"k{k}/mu1"), frame.feature_names)
            mu0[test] = predict_proba(m0, X[test])
            mu1[test] = predict_proba(m1, X[test])
        else:
            m = fit(spec, X[train], y[train], seed.child(f"k{k}/mu"), frame.feature_names)
            mu0[test] = mu1[test] = predict_proba(m, X[test])
    if return_folds:
        return mu0, mu1, fold_of
    return mu0, mu1
