"""Synthetic RCT scenarios with known truth and the beta prediction simulator.

Scenario predictors (x1..x6 are feature columns 0..5, sigma is the logistic
sigmoid, w the treatment flag)::

    1: x1 + 0.5 x2 + x3 x4 - 4 + 0.1 w
    2: x1^2 + 0.5 x2 + x3 x4 - 7 + (1.1 + x5) w
    3: 0.1 exp(x1) + 0.5 x2^3 + x3 - 7 + (0.1 + x5 x6) w
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import DataError, PopulationFrame, SeedSpec, SimulatedTruth, ValidationError, as_seed
from .design import design_curve, select_plan, stratified_variance

SCENARIOS = (1, 2, 3)
MU_CLAMP = 1e-9


def default_nu_grid() -> tuple[float, ...]:
    return tuple(float(v) for v in np.geomspace(0.2, 200.0, 16))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: int
    n_rows: int
    n_features: int = 10
    treatment_p: float = 0.5
    seed: SeedSpec | int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}")
        if self.n_features < 6:
            raise ValidationError("scenarios need at least 6 feature columns")
        if self.n_rows < 1:
            raise ValidationError("n_rows must be positive")
        if not 0 < self.treatment_p < 1:
            raise ValidationError("treatment_p must lie in (0, 1)")


@dataclass(frozen=True)
class RobustnessConfig:
    alpha_mode: str = "overfit"
    nu_grid: tuple[float, ...] = field(default_factory=default_nu_grid)
    scenario: int = 1
    n_rows: int = 100_000
    seed: SeedSpec | int = 0
    treatment_p: float = 0.5
    baseline: str = "random"

    def __post_init__(self):
        if self.alpha_mode not in ("overfit", "optimal"):
            raise ValidationError("alpha_mode must be 'overfit' or 'optimal'")
        if any(nu <= 0 for nu in self.nu_grid):
            raise ValidationError("nu values must be positive")
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}")
        if self.baseline not in ("random", "proportional"):
            raise ValidationError("baseline must be 'random' or 'proportional'")


def feature_names(d: int) -> tuple[str, ...]:
    return tuple(f"x{j + 1}" for j in range(d))


def linear_predictors(scenario: int, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Base predictor f(x) and treatment shift g(x): logit P(y=1) = f + g * w."""
    x = lambda j: X[:, j - 1]
    if scenario == 1:
        f = x(1) + 0.5 * x(2) + x(3) * x(4) - 4.0
        g = np.full(X.shape[0], 0.1)
    elif scenario == 2:
        f = x(1) ** 2 + 0.5 * x(2) + x(3) * x(4) - 7.0
        g = 1.1 + x(5)
    elif scenario == 3:
        f = 0.1 * np.exp(x(1)) + 0.5 * x(2) ** 3 + x(3) - 7.0
        g = 0.1 + x(5) * x(6)
    else:
        raise ValidationError(f"unknown scenario {scenario}")
    return f, g


def scenario_truth(scenario: int, X: np.ndarray) -> SimulatedTruth:
    f, g = linear_predictors(scenario, np.asarray(X, dtype=float))
    mu0 = expit(f)
    return SimulatedTruth(mu0, expit(f + g) - mu0)


def draw_features(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, d))


def draw_outcomes(truth: SimulatedTruth, treatment, rng: np.random.Generator) -> np.ndarray:
    prob = truth.mu0 + np.asarray(treatment) * truth.tau
    return (rng.random(prob.shape[0]) < prob).astype(np.int8)


def generate_population(
    scenario: int, n_rows: int, n_features: int = 10, seed: SeedSpec | int | None = None
) -> tuple[PopulationFrame, SimulatedTruth]:
    """Features and truth only (no treatment, no outcome): a customer base."""
    rng = as_seed(seed, "population").rng()
    X = draw_features(n_rows, n_features, rng)
    return PopulationFrame(X, feature_names(n_features)), scenario_truth(scenario, X)


def generate_pre_experiment(
    scenario: int, n_rows: int, n_features: int = 10, seed: SeedSpec | int | None = None
) -> tuple[PopulationFrame, SimulatedTruth]:
    """Untreated historical data: y ~ Bern(mu0)."""
    seed = as_seed(seed, "pre")
    frame, truth = generate_population(scenario, n_rows, n_features, seed.child("x"))
    y = draw_outcomes(truth, np.zeros(n_rows, dtype=np.int8), seed.child("y").rng())
    return frame.with_columns(outcome=y, treatment=np.zeros(n_rows, dtype=np.int8)), truth


def generate_scenario(spec: ScenarioSpec) -> tuple[PopulationFrame, SimulatedTruth]:
    """Simulated RCT rows: x ~ N(0, I), w ~ Bern(p), y ~ Bern(sigma(f + g w))."""
    seed = as_seed(spec.seed, "scenario")
    frame, truth = generate_population(spec.scenario, spec.n_rows, spec.n_features, seed.child("x"))
    w = (seed.child("w").rng().random(spec.n_rows) < spec.treatment_p).astype(np.int8)
    y = draw_outcomes(truth, w, seed.child("y").rng())
    return frame.with_columns(outcome=y, treatment=w), truth


# --------------------------------------------------------------------------- robustness


def simulate_predictions(truth: SimulatedTruth, config: RobustnessConfig, nu: float, seed=None) -> np.ndarray:
    """Noisy outcome-model predictions: alpha * Beta(nu mu, nu (1 - mu)) + (1 - alpha) * mean(mu).

    ``overfit`` uses alpha = 1; ``optimal`` uses the MSE-minimising shrinkage
    alpha = Cor(mu_tilde, mu) * sd(mu) / sd(mu_tilde), computed on the draw.
    """
    if nu <= 0:
        raise ValidationError("nu must be positive")
    mu = np.clip(truth.mu0, MU_CLAMP, 1 - MU_CLAMP)
    if seed is None:
        seed = as_seed(config.seed, "predictions").child(f"nu={nu!r}")
    rng = as_seed(seed, "predictions").rng()
    tilde = rng.beta(nu * mu, nu * (1 - mu))
    if config.alpha_mode == "overfit":
        alpha = 1.0
    else:
        sd_t = tilde.std()
        alpha = 0.0 if sd_t == 0 else float(np.corrcoef(tilde, truth.mu0)[0, 1] * truth.mu0.std() / sd_t)
    return alpha * tilde + (1 - alpha) * truth.mu0.mean()


def accuracy_measure(predictions, mu0) -> float:
    """1 - MSE / Var[mu]; 1 is perfect, 0 is the constant-mean predictor."""
    pred = np.asarray(predictions, dtype=float)
    mu = np.asarray(mu0, dtype=float)
    if pred.size == 0 or pred.shape != mu.shape:
        raise ValidationError("predictions and mu0 must be non-empty and of equal length")
    v = mu.var()
    if np.ptp(mu) == 0:  # var() of a constant can round to ~1e-33 instead of 0
        raise ValidationError("mu0 has no variance; accuracy is undefined")
    return float(1.0 - np.mean((pred - mu) ** 2) / v)


def _arm_variance(truth: SimulatedTruth, mask: np.ndarray, p: float) -> float:
    m0 = truth.mu0[mask].mean()
    m1 = truth.mu1[mask].mean()
    return m1 * (1 - m1) / p + m0 * (1 - m0) / (1 - p)


def realized_variance_reduction(
    truth: SimulatedTruth, predictions, threshold: float, share_H: float, p: float = 0.5, baseline: str = "random"
) -> float:
    """1 - Var[stratified, HS allocation] / Var[baseline] from the true outcome probabilities.

    Strata are formed by ``predictions > threshold``; ``share_H`` is the
    fraction of the sample drawn from S_H (R_H * p_H).
    """
    high = np.asarray(predictions) > threshold
    p_H = high.mean()
    if p_H in (0.0, 1.0):
        return 0.0
    V_H = _arm_variance(truth, high, p)
    V_L = _arm_variance(truth, ~high, p)
    var_hs = stratified_variance(share_H, p_H, V_H, V_L)
    if baseline == "random":
        var_base = _arm_variance(truth, np.ones(high.shape, dtype=bool), p)
    else:
        var_base = stratified_variance(p_H, p_H, V_H, V_L)
    return float(1.0 - var_hs / var_base)


def design_variance_reduction(
    truth: SimulatedTruth, predictions, p: float = 0.5, baseline: str = "random"
) -> tuple[float, float]:
    """Realized (unadjusted, adjusted) variance reduction of the design chosen from ``predictions``.

    Predictions without usable spread give no design; both values are then 0
    (sampling falls back to the baseline).
    """
    try:
        curve = design_curve(predictions)
    except DataError:
        return 0.0, 0.0
    out = []
    for adjust in (False, True):
        plan = select_plan(curve, N=1, p=p, adjust=adjust)
        out.append(
            realized_variance_reduction(
                truth, predictions, plan.effective_threshold, plan.effective_R_H * plan.effective_p_H, p, baseline
            )
        )
    return out[0], out[1]


def robustness_sweep(config: RobustnessConfig, truth: SimulatedTruth | None = None) -> list[dict]:
    """Variance reduction of the chosen HS design, unadjusted and adjusted, per nu."""
    seed = as_seed(config.seed, "robustness")
    if truth is None:
        _, truth = generate_population(config.scenario, config.n_rows, 10, seed.child("population"))
    rows = []
    for nu in config.nu_grid:
        pred = simulate_predictions(truth, config, nu, seed.child(f"nu={nu!r}"))
        vr_u, vr_a = design_variance_reduction(truth, pred, config.treatment_p, config.baseline)
        rows.append({"nu": float(nu), "accuracy": accuracy_measure(pred, truth.mu0), "vr_unadjusted": vr_u, "vr_adjusted": vr_a})
    return rows
