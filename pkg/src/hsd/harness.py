"""Repeated-sampling experiments: model training and evaluation pipelines.

Both pipelines share one setup: an outcome model is fitted on untreated
pre-experiment rows, applied to the customer base, and the HS plan is chosen
from the resulting design curve. Each repetition then draws fresh cohorts from
the customer base with its own derived seed, so repetitions are independent
and their order does not affect the aggregate.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np
from scipy.stats import norm

from .data import (
    CsvSchema,
    DataError,
    PopulationFrame,
    SeedSpec,
    SimulatedTruth,
    ValidationError,
    load_csv,
    round_half_up,
)
from .design import DesignCurve, SamplingPlan, design_curve, select_plan
from .estimation import (
    covariate_adjusted_ate,
    cross_fitted_phi,
    diff_in_means,
    hs_estimate,
    stratified_ate,
)
from .evaluation import auq_decile, auq_oracle, hs_qini_curve, qini_curve, truth_qini_curve
from .learners import OutcomeLearnerSpec, fit, predict_proba
from .sampling import Cohort, assign_treatment, draw_cohort, draw_uniform_cohort
from .simulation import SCENARIOS, draw_outcomes, generate_population, generate_pre_experiment, generate_scenario, ScenarioSpec
from .uplift import fit_t_learner, fit_uplift, predict_cate

log = logging.getLogger(__name__)

PIPELINES = ("training", "evaluation")
ESTIMATORS = ("dim", "stratified", "covadj", "hs", "hs_covadj")
QINI_MODES = ("none", "covadj", "hs", "hs_covadj", "hs_uncorrected")
ADJUSTMENTS = ("oracle", "cross_fit")


@dataclass(frozen=True)
class DataSource:
    """A real RCT file: untreated rows provide the pre-experiment share."""

    path: str
    schema: CsvSchema
    pre_experiment_share: float = 0.01

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> "DataSource":
        schema = d["schema"] if isinstance(d["schema"], CsvSchema) else CsvSchema.from_mapping(d["schema"])
        return cls(str(d["path"]), schema, float(d.get("pre_experiment_share", 0.01)))

    def to_dict(self) -> dict:
        return {"path": self.path, "schema": asdict(self.schema), "pre_experiment_share": self.pre_experiment_share}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run depends on, besides code.

    Sizes default to the full-scale setting (pre-experiment 100,000, cohorts
    of 20,000, customer base and test frame of 250,000, 1,000 repetitions).
    """

    pipeline: str = "evaluation"
    scenario: int | None = 3
    data: DataSource | None = None
    repetitions: int = 1000
    pre_experiment_rows: int = 100_000
    population_rows: int = 250_000
    cohort_size: int = 20_000
    test_rows: int = 250_000
    n_features: int = 10
    treatment_p: float = 0.5
    adjust: bool = True
    force_R_H: float | None = None
    outcome_learner: OutcomeLearnerSpec = field(default_factory=OutcomeLearnerSpec)
    uplift_learner: OutcomeLearnerSpec = field(default_factory=OutcomeLearnerSpec)
    meta_learners: tuple[str, ...] = ("T",)
    estimators: tuple[str, ...] = ("dim", "covadj", "hs", "hs_covadj")
    qini_modes: tuple[str, ...] = ("none", "covadj", "hs", "hs_covadj")
    adjustment: str = "oracle"
    qini_T: int = 10
    auq_T: int = 100
    folds: int = 5
    workers: int = 1
    max_failure_share: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValidationError(f"pipeline must be one of {PIPELINES}")
        if (self.scenario is None) == (self.data is None):
            raise ValidationError("give exactly one of scenario and data")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        for name in ("pre_experiment_rows", "population_rows", "cohort_size", "test_rows"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.data is None and self.cohort_size > self.population_rows:
            raise ValidationError("cohort_size exceeds population_rows")
        if not 0 < self.treatment_p < 1:
            raise ValidationError("treatment_p must lie in (0, 1)")
        if self.force_R_H is not None and self.force_R_H <= 0:
            raise ValidationError("force_R_H must be positive")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or "dim" not in self.estimators:
            raise ValidationError(f"estimators must include 'dim' and come from {ESTIMATORS}")
        bad = set(self.qini_modes) - set(QINI_MODES)
        if bad or (self.qini_modes and "none" not in self.qini_modes):
            raise ValidationError(f"qini modes must include 'none' and come from {QINI_MODES}")
        if self.adjustment not in ADJUSTMENTS:
            raise ValidationError(f"adjustment must be one of {ADJUSTMENTS}")
        if self.data is not None and self.adjustment == "oracle":
            object.__setattr__(self, "adjustment", "cross_fit")
        if not self.meta_learners:
            raise ValidationError("at least one meta-learner is required")
        if self.qini_T < 1 or self.auq_T < 1 or self.folds < 2 or self.workers < 1:
            raise ValidationError("qini_T, auq_T, workers must be >= 1 and folds >= 2")
        if not 0 <= self.max_failure_share < 1:
            raise ValidationError("max_failure_share must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config key(s): {sorted(unknown)}")
        if d.get("data") is not None:
            d["data"] = DataSource.from_mapping(d["data"])
            d.setdefault("scenario", None)
        for key in ("outcome_learner", "uplift_learner"):
            if key in d:
                d[key] = OutcomeLearnerSpec.from_config(d[key])
        for key in ("meta_learners", "estimators", "qini_modes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if isinstance(v, OutcomeLearnerSpec):
                v = v.to_config()
            elif isinstance(v, DataSource):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[name] = v
        return out


def jsonable(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass(eq=False)
class ExperimentReport:
    """Aggregated outcome of one experiment run.

    ``runtime_seconds`` and ``samples`` (per-repetition raw values) are kept
    on the object but left out of the JSON so identical runs serialize to
    identical bytes.
    """

    pipeline: str
    config: dict
    plan: dict
    results: dict
    repetitions: int
    failures: list
    metadata: dict
    samples: dict = field(default_factory=dict, repr=False)
    runtime_seconds: float = 0.0

    def to_dict(self) -> dict:
        return jsonable(
            {
                "pipeline": self.pipeline,
                "config": self.config,
                "plan": self.plan,
                "results": self.results,
                "repetitions": self.repetitions,
                "failures": self.failures,
                "metadata": self.metadata,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)


def confidence_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval mean +- z * sd / sqrt(n) (sd with ddof=1)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("a confidence interval needs at least 2 samples")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2)
    half = z * x.std(ddof=1) / math.sqrt(x.size)
    m = float(x.mean())
    return m - half, m + half


# --------------------------------------------------------------------------- setup


@dataclass(eq=False)
class _Setup:
    config: ExperimentConfig
    seed: SeedSpec
    population: PopulationFrame
    truth: SimulatedTruth | None
    predictions: np.ndarray
    curve: DesignCurve
    plan: SamplingPlan
    labels: np.ndarray
    p: float
    test: PopulationFrame | None = None
    test_truth: SimulatedTruth | None = None
    uplift_train: PopulationFrame | None = None
    scores: np.ndarray | None = None


def _plan(predictions: np.ndarray, config: ExperimentConfig, p: float) -> tuple[DesignCurve, SamplingPlan]:
    curve = design_curve(predictions)
    plan = select_plan(curve, config.cohort_size, p, config.adjust)
    if config.force_R_H is not None:
        plan = replace(plan, R_H=config.force_R_H, R_H_adjusted=config.force_R_H)
    return curve, plan


def _split_real(config: ExperimentConfig, seed: SeedSpec):
    frame = load_csv(config.data.path, config.data.schema)
    frame.require("outcome", "treatment")
    rng = seed.child("split").rng()
    control = np.flatnonzero(frame.treatment == 0)
    n_pre = round_half_up(config.data.pre_experiment_share * frame.n_rows)
    if n_pre < 1 or n_pre >= control.size:
        raise DataError(f"cannot take {n_pre} pre-experiment rows from {control.size} control rows")
    pre = np.sort(rng.choice(control, size=n_pre, replace=False))
    rest = np.setdiff1d(np.arange(frame.n_rows), pre)
    rest = rest[rng.permutation(rest.size)]
    n_held = config.test_rows if config.pipeline == "training" else config.cohort_size
    if n_held >= rest.size:
        raise DataError("not enough rows left for the held-out part")
    held = np.sort(rest[:n_held])
    pool = np.sort(rest[n_held:])
    return frame.take(pre), frame.take(held), frame.take(pool)


def _build_setup(config: ExperimentConfig) -> _Setup:
    seed = SeedSpec(int(config.seed), "experiment")
    if config.data is None:
        pre, _ = generate_pre_experiment(config.scenario, config.pre_experiment_rows, config.n_features, seed.child("pre"))
        population, truth = generate_population(
            config.scenario, config.population_rows, config.n_features, seed.child("population")
        )
        p = config.treatment_p
        held = held_truth = None
        if config.pipeline == "training":
            held, held_truth = generate_population(config.scenario, config.test_rows, config.n_features, seed.child("test"))
        else:
            spec = ScenarioSpec(config.scenario, config.cohort_size, config.n_features, p, seed.child("uplift_train"))
            held, _ = generate_scenario(spec)
    else:
        pre, held, population = _split_real(config, seed)
        truth = held_truth = None
        p = float(population.treatment.mean())
    mu_hat = fit(config.outcome_learner, pre.features, pre.outcome, seed.child("outcome_model"), pre.feature_names)
    predictions = predict_proba(mu_hat, population)
    curve, plan = _plan(predictions, config, p)
    labels = predictions > plan.effective_threshold
    setup = _Setup(config, seed, population, truth, predictions, curve, plan, labels, p)
    if config.pipeline == "training":
        setup.test, setup.test_truth = held, held_truth
    else:
        setup.uplift_train = held
        model = fit_t_learner(held, config.uplift_learner, seed.child("uplift_model"))
        setup.scores = predict_cate(model, population)
    return setup


# --------------------------------------------------------------------------- repetitions


@dataclass(frozen=True, eq=False)
class _Realized:
    positions: np.ndarray
    high: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray


def _realize(setup: _Setup, cohort: Cohort, seed: SeedSpec) -> _Realized:
    """Treatment and outcomes for a cohort: simulated draws or the observed RCT columns."""
    pos = cohort.positions
    if setup.truth is None:
        return _Realized(pos, cohort.high, setup.population.treatment[pos], setup.population.outcome[pos])
    cohort = assign_treatment(cohort, setup.p, seed.child("treatment"))
    y = draw_outcomes(setup.truth.take(pos), cohort.treatment, seed.child("outcome").rng())
    return _Realized(pos, cohort.high, cohort.treatment, y)


def _cohort_frame(setup: _Setup, r: _Realized) -> PopulationFrame:
    return setup.population.take(r.positions).with_columns(outcome=r.outcome, treatment=r.treatment)


def _phi(setup: _Setup, r: _Realized, seed: SeedSpec) -> np.ndarray:
    cfg = setup.config
    if cfg.adjustment == "oracle":
        return setup.truth.take(r.positions).phi(setup.p)
    return cross_fitted_phi(_cohort_frame(setup, r), cfg.uplift_learner, setup.p, cfg.folds, seed.child("phi"))


def _rep_seed(setup: _Setup, rep: int) -> SeedSpec:
    return setup.seed.child(f"rep/{rep}")


def _population_p_H(setup: _Setup) -> float:
    return float(setup.labels.mean())


def _evaluation_rep(setup: _Setup, rep: int) -> dict:
    cfg = setup.config
    s = _rep_seed(setup, rep)
    pop_pH = _population_p_H(setup)
    uni = _realize(setup, draw_uniform_cohort(setup.population, cfg.cohort_size, s.child("uniform"), setup.labels), s.child("uniform"))
    hs = _realize(setup, draw_cohort(setup.population, setup.labels, setup.plan, s.child("hs")), s.child("hs"))
    need_adj = {"covadj", "hs_covadj"} & (set(cfg.estimators) | set(cfg.qini_modes))
    phi_u = _phi(setup, uni, s.child("uniform")) if need_adj else None
    phi_h = _phi(setup, hs, s.child("hs")) if need_adj else None

    ate = {}
    for m in cfg.estimators:
        if m == "dim":
            est = diff_in_means(uni.outcome, uni.treatment)
        elif m == "stratified":
            plan = SamplingPlan.proportional(setup.plan.effective_p_H, setup.plan.effective_threshold, cfg.cohort_size, setup.p)
            prop = _realize(setup, draw_cohort(setup.population, setup.labels, plan, s.child("proportional")), s.child("proportional"))
            est = stratified_ate(prop.outcome, prop.treatment, prop.high, pop_pH)
        elif m == "covadj":
            if cfg.adjustment == "oracle":
                est = diff_in_means(uni.outcome - phi_u, uni.treatment, method="oracle_covadj")
            else:
                est = covariate_adjusted_ate(_cohort_frame(setup, uni), cfg.uplift_learner, cfg.folds, s.child("covadj"))
        elif m == "hs":
            est = hs_estimate(hs.outcome, hs.treatment, hs.high, pop_pH)
        else:
            est = hs_estimate(hs.outcome, hs.treatment, hs.high, pop_pH, mode="covadj", phi=phi_h)
        ate[m] = (est.value, est.variance_hat)

    qini = {}
    sc = setup.scores
    T = cfg.qini_T
    for mode in cfg.qini_modes:
        if mode == "none":
            c = qini_curve(sc[uni.positions], uni.outcome, uni.treatment, T)
        elif mode == "covadj":
            c = qini_curve(sc[uni.positions], uni.outcome, uni.treatment, T, adjusted_outcome=uni.outcome - phi_u)
        elif mode == "hs_uncorrected":
            c = qini_curve(sc[hs.positions], hs.outcome, hs.treatment, T)
        else:
            adj = None if mode == "hs" else hs.outcome - phi_h
            c = hs_qini_curve(sc[hs.positions], hs.outcome, hs.treatment, hs.high, sc, setup.labels, T, adj)
        if c.missing.any():
            raise DataError(f"Qini mode {mode}: a top set lacks a treatment arm")
        qini[mode] = (c.q_values, c.variance_hat * c.grid**2)
    return {"ate": ate, "qini": qini}


def _training_rep(setup: _Setup, rep: int) -> dict:
    cfg = setup.config
    s = _rep_seed(setup, rep)
    uni = _realize(setup, draw_uniform_cohort(setup.population, cfg.cohort_size, s.child("uniform"), setup.labels), s.child("uniform"))
    hs = _realize(setup, draw_cohort(setup.population, setup.labels, setup.plan, s.child("hs")), s.child("hs"))
    out = {}
    for meta in cfg.meta_learners:
        auq = {}
        for name, r in (("uniform", uni), ("hs", hs)):
            model = fit_uplift(meta, _cohort_frame(setup, r), cfg.uplift_learner, s.child(f"{meta}/{name}"), setup.p)
            scores = predict_cate(model, setup.test)
            if setup.test_truth is not None:
                auq[name] = auq_oracle(scores, setup.test_truth.tau).value
            else:
                auq[name] = auq_decile(scores, setup.test.outcome, setup.test.treatment, cfg.auq_T).value
        if not np.isfinite(auq["uniform"]) or not np.isfinite(auq["hs"]) or auq["uniform"] == 0:
            raise DataError(f"{meta}-learner: AUQ undefined in repetition {rep}")
        out[meta] = (auq["uniform"], auq["hs"], 100.0 * (auq["hs"] / auq["uniform"] - 1.0))
    return out


_WORKER_SETUP: _Setup | None = None


def _init_worker(setup: _Setup) -> None:
    global _WORKER_SETUP
    _WORKER_SETUP = setup


def _guarded(fn: Callable, setup: _Setup, rep: int):
    try:
        return rep, fn(setup, rep), None
    except DataError as exc:
        return rep, None, str(exc)


def _worker_call(args):
    fn, rep = args
    return _guarded(fn, _WORKER_SETUP, rep)


def _run_reps(fn: Callable, setup: _Setup) -> tuple[dict, list]:
    cfg = setup.config
    reps = range(cfg.repetitions)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(setup,)) as pool:
            raw = list(pool.map(_worker_call, [(fn, r) for r in reps]))
    else:
        raw = [_guarded(fn, setup, r) for r in reps]
    results, failures = {}, []
    for rep, res, err in sorted(raw, key=lambda t: t[0]):
        if err is None:
            results[rep] = res
        else:
            failures.append({"repetition": rep, "error": err})
    if failures:
        log.warning("%d of %d repetitions failed and were dropped", len(failures), cfg.repetitions)
    if len(failures) > cfg.max_failure_share * cfg.repetitions:
        raise DataError(
            f"{len(failures)} of {cfg.repetitions} repetitions failed "
            f"(limit {cfg.max_failure_share:.0%}); first error: {failures[0]['error']}"
        )
    if len(results) < 2:
        raise DataError("fewer than 2 successful repetitions; variances are undefined")
    return results, failures


# --------------------------------------------------------------------------- aggregation


def _summary(values: np.ndarray, variance_hats: np.ndarray, empirical: bool) -> dict:
    n = values.shape[0]
    var_emp = values.var(axis=0, ddof=1)
    mean_vhat = variance_hats.mean(axis=0)
    return {
        "mean": values.mean(axis=0),
        "variance": var_emp if empirical else mean_vhat,
        "variance_source": "empirical" if empirical else "mean_analytic",
        "empirical_variance": var_emp,
        "mean_variance_hat": mean_vhat,
        "mc_se": np.sqrt(var_emp / n),
    }


def _reduction(var: np.ndarray, base: np.ndarray) -> np.ndarray:
    return 100.0 * (1.0 - np.asarray(var) / np.asarray(base))


def _plan_dict(setup: _Setup) -> dict:
    d = setup.plan.to_dict()
    d["population_p_H"] = _population_p_H(setup)
    d["treatment_proportion"] = setup.p
    return d


def _metadata(config: ExperimentConfig) -> dict:
    from . import __version__

    return {"seed": int(config.seed), "package_version": __version__}


def run_evaluation_experiment(config: ExperimentConfig) -> ExperimentReport:
    """ATE and Qini variances on uniform vs HS test cohorts for one fixed T-learner."""
    if config.pipeline != "evaluation":
        config = replace(config, pipeline="evaluation")
    start = time.perf_counter()
    setup = _build_setup(config)
    results, failures = _run_reps(_evaluation_rep, setup)
    reps = sorted(results)
    empirical = setup.truth is not None

    ate = {}
    samples = {}
    for m in config.estimators:
        vals = np.array([results[r]["ate"][m][0] for r in reps])
        vhat = np.array([results[r]["ate"][m][1] for r in reps])
        ate[m] = _summary(vals, vhat, empirical)
        samples[f"ate/{m}"] = vals
    for m in config.estimators:
        ate[m]["variance_reduction_pct"] = _reduction(ate[m]["variance"], ate["dim"]["variance"])

    qini = {}
    for mode in config.qini_modes:
        vals = np.array([results[r]["qini"][mode][0] for r in reps])
        vhat = np.array([results[r]["qini"][mode][1] for r in reps])
        qini[mode] = _summary(vals, vhat, empirical)
        samples[f"qini/{mode}"] = vals
    for mode in config.qini_modes:
        red = _reduction(qini[mode]["variance"], qini["none"]["variance"])
        qini[mode]["variance_reduction_pct"] = red
        qini[mode]["variance_reduction_range_pct"] = [float(np.min(red)), float(np.max(red))]

    res: dict = {"ate": ate, "qini": qini, "grid": (np.arange(1, config.qini_T + 1) / config.qini_T)}
    if setup.truth is not None:
        res["true_ate"] = float(setup.truth.tau.mean())
        res["truth_qini"] = truth_qini_curve(setup.scores, setup.truth.tau, config.qini_T)
    report = ExperimentReport(
        "evaluation", config.to_dict(), _plan_dict(setup), res, config.repetitions, failures, _metadata(config), samples
    )
    report.runtime_seconds = time.perf_counter() - start
    return report


def run_training_experiment(config: ExperimentConfig) -> ExperimentReport:
    """AUQ gain of uplift models trained on HS cohorts over models trained on uniform cohorts."""
    if config.pipeline != "training":
        config = replace(config, pipeline="training")
    start = time.perf_counter()
    setup = _build_setup(config)
    results, failures = _run_reps(_training_rep, setup)
    reps = sorted(results)
    res = {}
    samples = {}
    for meta in config.meta_learners:
        arr = np.array([results[r][meta] for r in reps])
        gain = arr[:, 2]
        low, high = confidence_interval(gain)
        res[meta] = {
            "auq_uniform_mean": arr[:, 0].mean(),
            "auq_hs_mean": arr[:, 1].mean(),
            "gain_pct_mean": gain.mean(),
            "gain_pct_ci95": [low, high],
            "n_repetitions": len(reps),
            "auq_estimator": "oracle_cdf" if setup.test_truth is not None else "decile",
        }
        samples[f"gain/{meta}"] = gain
    report = ExperimentReport(
        "training", config.to_dict(), _plan_dict(setup), res, config.repetitions, failures, _metadata(config), samples
    )
    report.runtime_seconds = time.perf_counter() - start
    return report


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    if config.pipeline == "training":
        return run_training_experiment(config)
    return run_evaluation_experiment(config)
