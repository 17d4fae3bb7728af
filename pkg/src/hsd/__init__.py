"""Heteroskedasticity-aware stratified sampling for RCTs with binary outcomes.

Design a two-stratum sampling plan from outcome-model predictions, draw and
randomize cohorts, estimate average and conditional treatment effects, and
evaluate uplift models with population-corrected Qini curves.
"""

__version__ = "0.1.0"

from .data import (
    CsvSchema,
    DataError,
    HsdError,
    PopulationFrame,
    SchemaError,
    SeedSpec,
    SimulatedTruth,
    ValidationError,
    emit_csv,
    load_csv,
)
from .design import (
    DesignCurve,
    DesignPoint,
    SamplingPlan,
    design_curve,
    optimal_oversampling_ratio,
    predicted_variance_ratio,
    safe_oversampling_bound,
    select_plan,
    stratum_variance_estimates,
)
from .estimation import (
    AteEstimate,
    covariate_adjusted_ate,
    diff_in_means,
    hs_estimate,
    oracle_adjusted_ate,
    stratified_ate,
)
from .evaluation import QiniCurve, auq_decile, auq_oracle, hs_qini_curve, qini_curve
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    confidence_interval,
    run_evaluation_experiment,
    run_training_experiment,
)
from .learners import OutcomeLearnerSpec, fit, predict_proba
from .sampling import Cohort, assign_treatment, draw_cohort, draw_uniform_cohort, stratify
from .simulation import RobustnessConfig, ScenarioSpec, generate_scenario, robustness_sweep
from .uplift import UpliftModel, fit_uplift, predict_cate
