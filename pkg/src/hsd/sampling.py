"""Stratify a population, draw HS or uniform cohorts, assign treatment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import (
    DataError,
    PopulationFrame,
    SeedSpec,
    ValidationError,
    as_seed,
    round_half_up,
)
from .design import SamplingPlan
from .learners import FittedOutcomeModel, predict_proba


@dataclass(frozen=True, eq=False)
class Cohort:
    """Rows selected for an experiment.

    ``positions`` index into the source population; ``high`` is the stratum
    label (True = S_H); ``treatment`` is None until assigned.
    """

    positions: np.ndarray
    ids: np.ndarray
    high: np.ndarray
    treatment: np.ndarray | None = None
    plan: SamplingPlan | None = None

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def kind(self) -> str:
        return "uniform" if self.plan is None else "hs"

    def strata(self) -> np.ndarray:
        return np.where(self.high, "H", "L")

    def frame(self, population: PopulationFrame) -> PopulationFrame:
        sub = population.take(self.positions)
        if self.treatment is not None:
            sub = sub.with_columns(treatment=self.treatment)
        return sub

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame({"id": self.ids, "stratum": self.strata()})
        if self.treatment is not None:
            df["treatment"] = self.treatment.astype(int)
        return df


def labels_from_predictions(predictions, threshold: float) -> np.ndarray:
    return np.asarray(predictions, dtype=float) > threshold


def stratify(population: PopulationFrame, model: FittedOutcomeModel, threshold: float) -> np.ndarray:
    """True (stratum H) where the model's prediction is strictly above ``threshold``."""
    return labels_from_predictions(predictions=predict_proba(model, population), threshold=threshold)


def stratum_counts(N: int, p_H: float, R_H: float) -> tuple[int, int]:
    n_H = round_half_up(N * R_H * p_H)
    return n_H, N - n_H


def draw_cohort(
    population: PopulationFrame,
    labels,
    plan: SamplingPlan,
    seed: SeedSpec | int | None = None,
    N: int | None = None,
) -> Cohort:
    """Simple random sampling without replacement inside each stratum.

    The high stratum contributes ``round(N * R_H * p_H)`` rows using the plan's
    effective (adjusted or not) p_H and R_H.
    """
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != (population.n_rows,):
        raise ValidationError("one stratum label per population row is required")
    N = plan.N if N is None else int(N)
    p_H, R_H = plan.effective_p_H, plan.effective_R_H
    n_H, n_L = stratum_counts(N, p_H, R_H)
    if n_L < 0:
        raise ValidationError(f"R_H * p_H = {R_H * p_H:g} exceeds 1")
    pool_H = np.flatnonzero(labels)
    pool_L = np.flatnonzero(~labels)
    if n_H > pool_H.size or n_L > pool_L.size:
        share = R_H * p_H
        caps = []
        if share > 0:
            caps.append(pool_H.size / share)
        if share < 1:
            caps.append(pool_L.size / (1 - share))
        max_N = int(np.floor(min(caps) + 1e-9))
        raise DataError(
            f"stratum exhausted: need {n_H} H / {n_L} L rows, have {pool_H.size} / {pool_L.size}; "
            f"maximum feasible N is {max_N}"
        )
    rng = as_seed(seed, "cohort").rng()
    take_H = rng.choice(pool_H, size=n_H, replace=False)
    take_L = rng.choice(pool_L, size=n_L, replace=False)
    pos = np.sort(np.concatenate([take_H, take_L]))
    return Cohort(pos, population.ids[pos], labels[pos], None, plan)


def draw_uniform_cohort(
    population: PopulationFrame,
    N: int,
    seed: SeedSpec | int | None = None,
    labels=None,
) -> Cohort:
    """Completely random cohort; stratum labels are carried along when given."""
    if N > population.n_rows:
        raise DataError(f"cohort of {N} requested from {population.n_rows} rows")
    rng = as_seed(seed, "cohort").rng()
    pos = np.sort(rng.choice(population.n_rows, size=N, replace=False))
    high = np.zeros(N, dtype=bool) if labels is None else np.asarray(labels, dtype=bool)[pos]
    return Cohort(pos, population.ids[pos], high, None, None)


def assign_treatment(
    cohort: Cohort,
    p: float,
    seed: SeedSpec | int | None = None,
    blocked: bool = False,
) -> Cohort:
    """Complete randomisation: exactly round(p * N) treated rows.

    Pooled over the whole cohort by default; ``blocked`` randomises inside
    each stratum separately.
    """
    if not 0 < p < 1:
        raise ValidationError(f"treatment proportion must lie in (0, 1), got {p}")
    rng = as_seed(seed, "treatment").rng()
    w = np.zeros(cohort.size, dtype=np.int8)
    groups = [np.flatnonzero(cohort.high), np.flatnonzero(~cohort.high)] if blocked else [np.arange(cohort.size)]
    for g in groups:
        n_t = round_half_up(p * g.size)
        w[rng.choice(g, size=n_t, replace=False)] = 1
    return Cohort(cohort.positions, cohort.ids, cohort.high, w, cohort.plan)
