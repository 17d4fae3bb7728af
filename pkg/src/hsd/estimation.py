"""ATE estimators and their variance estimates."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import DataError, PopulationFrame, SeedSpec, SimulatedTruth, ValidationError, as_seed
from .learners import OutcomeLearnerSpec, cross_fit_predictions

METHODS = ("dim", "stratified", "covadj", "oracle_covadj", "hs", "hs_covadj")


@dataclass(frozen=True)
class AteEstimate:
    value: float
    variance_hat: float
    method: str
    n_used: int
    n_treated: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VarianceDecomposition:
    zeta_var_over_N: float
    eps_bar_var_over_N: float
    total: float


def _arm_stats(y: np.ndarray, mask: np.ndarray) -> tuple[float, float, int]:
    vals = y[mask]
    n = vals.shape[0]
    mean = vals.mean()
    var = vals.var(ddof=1) if n > 1 else 0.0
    return mean, var, n


def diff_in_means(outcome, treatment, method: str = "dim") -> AteEstimate:
    """Treated mean minus control mean with the unpooled variance estimate."""
    y = np.asarray(outcome, dtype=float)
    w = np.asarray(treatment)
    if y.shape != w.shape:
        raise ValidationError("outcome and treatment must have equal length")
    t = w == 1
    c = w == 0
    if not t.any() or not c.any():
        raise DataError("difference in means needs both arms to be non-empty")
    m1, v1, n1 = _arm_stats(y, t)
    m0, v0, n0 = _arm_stats(y, c)
    return AteEstimate(float(m1 - m0), float(v1 / n1 + v0 / n0), method, n1 + n0, n1)


def stratified_ate(outcome, treatment, labels, population_p_H: float, method: str = "stratified") -> AteEstimate:
    """Population-weighted combination of per-stratum differences in means.

    ``population_p_H`` is the share of S_H in the population, not in the
    sample, which is what keeps the estimate unbiased under oversampling.
    A stratum with weight 0 may be empty.
    """
    y = np.asarray(outcome, dtype=float)
    w = np.asarray(treatment)
    high = np.asarray(labels, dtype=bool)
    if not 0.0 <= population_p_H <= 1.0:
        raise ValidationError(f"population p_H must lie in [0, 1], got {population_p_H}")
    value = 0.0
    variance = 0.0
    for name, mask, weight in (("H", high, population_p_H), ("L", ~high, 1.0 - population_p_H)):
        if weight == 0.0:
            continue
        try:
            est = diff_in_means(y[mask], w[mask])
        except DataError:
            raise DataError(f"stratum {name} lacks a treated or control observation") from None
        value += weight * est.value
        variance += weight**2 * est.variance_hat
    return AteEstimate(float(value), float(variance), method, int(y.shape[0]), int((w == 1).sum()))


def oracle_adjusted_ate(outcome, treatment, truth: SimulatedTruth, p: float) -> AteEstimate:
    """Difference in means of y - (mu + (1 - p) * tau); simulation only."""
    y = np.asarray(outcome, dtype=float)
    return diff_in_means(y - truth.phi(p), treatment, method="oracle_covadj")


def cross_fitted_ate(outcome, treatment, mu0_hat, mu1_hat, folds) -> AteEstimate:
    """Average over folds of the per-fold augmented estimate.

    Per fold: mean(mu1 - mu0) + treated mean of (y - mu1) - control mean of (y - mu0).
    The variance uses the difference-in-means formula on y - phi_hat with
    phi_hat = p * mu0 + (1 - p) * mu1 (p the treated share).
    """
    y = np.asarray(outcome, dtype=float)
    w = np.asarray(treatment)
    mu0 = np.asarray(mu0_hat, dtype=float)
    mu1 = np.asarray(mu1_hat, dtype=float)
    folds = np.asarray(folds)
    taus = []
    for k in np.unique(folds):
        f = folds == k
        t = f & (w == 1)
        c = f & (w == 0)
        if not t.any() or not c.any():
            raise DataError(f"fold {k} lacks a treatment arm")
        taus.append((mu1[f] - mu0[f]).mean() + (y[t] - mu1[t]).mean() - (y[c] - mu0[c]).mean())
    p = float((w == 1).mean())
    phi = p * mu0 + (1 - p) * mu1
    var = diff_in_means(y - phi, w).variance_hat
    return AteEstimate(float(np.mean(taus)), var, "covadj", int(y.shape[0]), int((w == 1).sum()))


def covariate_adjusted_ate(
    frame: PopulationFrame,
    spec: OutcomeLearnerSpec,
    folds: int = 5,
    seed: SeedSpec | int | None = None,
) -> AteEstimate:
    """Cross-fitted covariate-adjusted ATE with per-arm outcome models."""
    frame.require("outcome", "treatment")
    mu0, mu1, fold_of = cross_fit_predictions(spec, frame, folds, per_arm=True, seed=as_seed(seed, "covadj"), return_folds=True)
    return cross_fitted_ate(frame.outcome, frame.treatment, mu0, mu1, fold_of)


def cross_fitted_phi(frame: PopulationFrame, spec: OutcomeLearnerSpec, p: float, folds: int = 5, seed=None) -> np.ndarray:
    """Out-of-fold adjustment term p * mu0_hat + (1 - p) * mu1_hat for real data."""
    mu0, mu1 = cross_fit_predictions(spec, frame, folds, per_arm=True, seed=as_seed(seed, "phi"))
    return p * mu0 + (1 - p) * mu1


def hs_estimate(outcome, treatment, labels, population_p_H: float, mode: str = "plain", phi=None) -> AteEstimate:
    """Stratified estimate on an HS cohort; ``covadj`` mode works on y - phi."""
    y = np.asarray(outcome, dtype=float)
    if mode == "plain":
        return stratified_ate(y, treatment, labels, population_p_H, method="hs")
    if mode == "covadj":
        if phi is None:
            raise ValidationError("covadj mode needs the adjustment term phi")
        return stratified_ate(y - np.asarray(phi, dtype=float), treatment, labels, population_p_H, method="hs_covadj")
    raise ValidationError(f"unknown mode {mode!r}")


def variance_decomposition(outcome, treatment, truth: SimulatedTruth, p: float) -> VarianceDecomposition:
    """Split Var[dim] into the signal part Var[zeta]/N and the noise part Var[eps_bar]/N."""
    y = np.asarray(outcome, dtype=float)
    w = np.asarray(treatment)
    weight = np.where(w == 1, 1.0 / p, -1.0 / (1.0 - p))
    signal = truth.mu0 + w * truth.tau
    zeta = weight * signal
    eps_bar = weight * (y - signal)
    N = y.shape[0]
    a = float(zeta.var() / N)
    b = float(eps_bar.var() / N)
    return VarianceDecomposition(a, b, a + b)
