"""Strata search and oversampling ratios for heteroskedasticity-aware sampling.

The customer base is split at a quantile of the outcome-model predictions
into a high stratum (predictions strictly above the threshold) and a low
stratum. Plugging the stratum mean prediction ``m`` into ``m * (1 - m)`` gives
the variance estimates from which the oversampling ratio of the high stratum
follows in closed form.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import DataError, ValidationError, ceil_count

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(j / 100 for j in range(1, 100))
ADJUST_P_FACTOR = 1.25
ADJUST_R_WEIGHT = 0.75
MAX_ADJUSTED_P = 0.5


def _check_share(p_H: float) -> None:
    if not 0.0 < p_H < 1.0:
        raise ValidationError(f"p_H must lie in (0, 1), got {p_H}")


def _check_qv(Q_V: float) -> None:
    if not Q_V > 0 or not math.isfinite(Q_V):
        raise ValidationError(f"Q_V must be a positive finite number, got {Q_V}")


def optimal_oversampling_ratio(p_H: float, Q_V: float) -> float:
    """Neyman-optimal ratio (sample share of S_H) / (population share of S_H)."""
    _check_share(p_H)
    _check_qv(Q_V)
    return 1.0 / (p_H + (1.0 - p_H) / math.sqrt(Q_V))


def predicted_variance_ratio(p_H: float, Q_V: float) -> float:
    """Variance of the optimally allocated estimator over proportional allocation."""
    _check_share(p_H)
    _check_qv(Q_V)
    return (p_H * math.sqrt(Q_V) + (1.0 - p_H)) ** 2 / (p_H * Q_V + (1.0 - p_H))


def safe_oversampling_bound(p_H: float, Q_V: float) -> float:
    """Largest ratio that still does not increase variance relative to R_H = 1."""
    _check_share(p_H)
    _check_qv(Q_V)
    if Q_V < 1.0:
        raise ValidationError(f"Q_V = {Q_V} < 1: the high stratum has the lower variance")
    return 1.0 / (p_H + (1.0 - p_H) / Q_V)


def stratified_variance(share_H: float, p_H: float, V_H: float, V_L: float, N: float = 1.0) -> float:
    """Variance of the stratified estimator when a fraction ``share_H`` of N comes from S_H."""
    N_H = share_H * N
    return p_H**2 * V_H / N_H + (1.0 - p_H) ** 2 * V_L / (N - N_H)


# --------------------------------------------------------------------------- strata


@dataclass(frozen=True)
class _Split:
    threshold: float
    share_H: float
    mean_H: float
    mean_L: float
    tie_share: float


class _SortedPredictions:
    """Sorted predictions with prefix sums for O(log n) stratum statistics."""

    def __init__(self, predictions):
        pred = np.asarray(predictions, dtype=float).ravel()
        if pred.size == 0:
            raise ValidationError("predictions must be non-empty")
        if not np.isfinite(pred).all():
            raise ValidationError("predictions must be finite")
        self.sorted = np.sort(pred)
        self.cumsum = np.concatenate([[0.0], np.cumsum(self.sorted)])
        self.n = pred.size

    def split(self, p_H: float) -> _Split:
        _check_share(p_H)
        n = self.n
        k = min(max(ceil_count(1.0 - p_H, n), 1), n)
        thr = float(self.sorted[k - 1])
        n_L = int(np.searchsorted(self.sorted, thr, side="right"))
        n_H = n - n_L
        if n_H == 0 or n_L == 0:
            raise DataError(
                f"p_H={p_H:g}: empty stratum after thresholding at {thr:g} (ties); try a different p_H"
            )
        n_tie = n_L - int(np.searchsorted(self.sorted, thr, side="left"))
        total = self.cumsum[-1]
        mean_L = self.cumsum[n_L] / n_L
        mean_H = (total - self.cumsum[n_L]) / n_H
        return _Split(thr, n_H / n, float(mean_H), float(mean_L), n_tie / n)


def stratum_threshold(predictions, p_H: float) -> float:
    """Order statistic at ceil((1 - p_H) * n); S_H is everything strictly above it."""
    return _SortedPredictions(predictions).split(p_H).threshold


def stratum_variance_estimates(predictions, p_H: float) -> tuple[float, float]:
    """Plug-in outcome variances (V_H, V_L) of the two strata."""
    s = _SortedPredictions(predictions).split(p_H)
    return s.mean_H * (1 - s.mean_H), s.mean_L * (1 - s.mean_L)


# --------------------------------------------------------------------------- curve


@dataclass(frozen=True)
class DesignPoint:
    p_H: float
    threshold: float
    V_H_hat: float
    V_L_hat: float
    Q_V_hat: float
    R_H: float
    predicted_ratio: float
    share_H: float = float("nan")
    tie_share: float = 0.0


def _design_point(preds: _SortedPredictions, p_H: float) -> DesignPoint:
    s = preds.split(p_H)
    V_H = s.mean_H * (1 - s.mean_H)
    V_L = s.mean_L * (1 - s.mean_L)
    if V_H <= 0 or V_L <= 0:
        raise DataError(f"p_H={p_H:g}: a stratum has zero estimated variance")
    Q = V_H / V_L
    if not math.isfinite(Q):
        raise DataError(f"p_H={p_H:g}: variance quotient is not finite")
    return DesignPoint(
        p_H=p_H,
        threshold=s.threshold,
        V_H_hat=V_H,
        V_L_hat=V_L,
        Q_V_hat=Q,
        R_H=optimal_oversampling_ratio(p_H, Q),
        predicted_ratio=predicted_variance_ratio(p_H, Q),
        share_H=s.share_H,
        tie_share=s.tie_share,
    )


class DesignCurve(Sequence):
    """Design points over a grid of p_H values.

    Keeps the sorted predictions so points off the grid (the adjusted p_H)
    can be evaluated later. ``skipped`` lists grid values that were infeasible.
    """

    def __init__(self, points: list[DesignPoint], skipped: list[float], predictions: _SortedPredictions | None):
        self.points = points
        self.skipped = skipped
        self._preds = predictions

    def __getitem__(self, i):
        return self.points[i]

    def __len__(self):
        return len(self.points)

    def point_at(self, p_H: float) -> DesignPoint:
        for pt in self.points:
            if math.isclose(pt.p_H, p_H, rel_tol=0, abs_tol=1e-12):
                return pt
        if self._preds is None:
            raise ValidationError(f"p_H={p_H} is not on the curve and no predictions are attached")
        return _design_point(self._preds, p_H)

    def to_rows(self) -> list[dict]:
        return [
            {k: getattr(pt, k) for k in ("p_H", "threshold", "V_H_hat", "V_L_hat", "Q_V_hat", "R_H", "predicted_ratio")}
            for pt in self.points
        ]


def design_curve(predictions, grid: Iterable[float] | None = None) -> DesignCurve:
    """Evaluate the predicted variance ratio for every p_H in ``grid``."""
    preds = _SortedPredictions(predictions)
    points, skipped = [], []
    for p_H in (DEFAULT_GRID if grid is None else grid):
        try:
            pt = _design_point(preds, float(p_H))
        except DataError:
            skipped.append(float(p_H))
            continue
        points.append(pt)
    tied = [pt.p_H for pt in points if pt.tie_share > 0.01]
    if tied:
        log.warning("%d grid value(s) have more than 1%% of predictions tied at the threshold", len(tied))
    if skipped:
        log.warning("design curve skipped %d infeasible grid value(s)", len(skipped))
    n_grid = len(points) + len(skipped)
    if len(points) < min(2, n_grid):
        raise DataError(f"only {len(points)} feasible design point(s); predictions carry no usable spread")
    return DesignCurve(points, skipped, preds)


# --------------------------------------------------------------------------- plan


@dataclass(frozen=True)
class SamplingPlan:
    p_H: float
    threshold: float
    Q_V_hat: float
    R_H: float
    predicted_ratio: float
    p_H_adjusted: float
    threshold_adjusted: float
    Q_V_hat_adjusted: float
    R_H_adjusted: float
    use_adjusted: bool = True
    treatment_proportion: float = 0.5
    N: int = 20_000
    clamped: bool = False

    def __post_init__(self):
        if not 0 < self.treatment_proportion < 1:
            raise ValidationError("treatment proportion must lie in (0, 1)")
        if self.N < 1:
            raise ValidationError("sample size N must be positive")

    @property
    def effective_p_H(self) -> float:
        return self.p_H_adjusted if self.use_adjusted else self.p_H

    @property
    def effective_R_H(self) -> float:
        return self.R_H_adjusted if self.use_adjusted else self.R_H

    @property
    def effective_threshold(self) -> float:
        return self.threshold_adjusted if self.use_adjusted else self.threshold

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})

    @classmethod
    def proportional(cls, p_H: float, threshold: float, N: int, p: float = 0.5) -> "SamplingPlan":
        """Plan with R_H = 1 (proportional stratified sampling) at a given split."""
        return cls(p_H, threshold, 1.0, 1.0, 1.0, p_H, threshold, 1.0, 1.0, False, p, N)


def _clamp(R: float, p_H: float) -> tuple[float, bool]:
    if R * p_H > 1.0:
        return 1.0 / p_H, True
    return R, False


def select_plan(curve: DesignCurve, N: int, p: float = 0.5, adjust: bool = True) -> SamplingPlan:
    """Pick the p_H with the smallest predicted ratio and derive the adjusted variant.

    The adjusted share is 1.25 * p_H (capped at 0.5); its ratio is recomputed
    from the variance quotient at that share and then pulled a quarter of the
    way towards 1.
    """
    if len(curve) == 0:
        raise ValidationError("design curve is empty")
    best = min(curve.points, key=lambda pt: (pt.predicted_ratio, pt.p_H))
    R, clamped = _clamp(best.R_H, best.p_H)
    p_ad = min(ADJUST_P_FACTOR * best.p_H, MAX_ADJUSTED_P)
    try:
        at_ad = curve.point_at(p_ad)
        R_ad = ADJUST_R_WEIGHT * at_ad.R_H + (1 - ADJUST_R_WEIGHT)
        thr_ad, Q_ad = at_ad.threshold, at_ad.Q_V_hat
    except DataError:
        # adjusted split is infeasible: fall back to the unadjusted stratum, shrunk ratio
        log.warning("adjusted p_H=%g infeasible; keeping p_H=%g", p_ad, best.p_H)
        p_ad, thr_ad, Q_ad = best.p_H, best.threshold, best.Q_V_hat
        R_ad = ADJUST_R_WEIGHT * best.R_H + (1 - ADJUST_R_WEIGHT)
    R_ad, clamped_ad = _clamp(R_ad, p_ad)
    if clamped or clamped_ad:
        log.warning("oversampling ratio clamped so that R_H * p_H <= 1")
    return SamplingPlan(
        p_H=best.p_H,
        threshold=best.threshold,
        Q_V_hat=best.Q_V_hat,
        R_H=R,
        predicted_ratio=best.predicted_ratio,
        p_H_adjusted=p_ad,
        threshold_adjusted=thr_ad,
        Q_V_hat_adjusted=Q_ad,
        R_H_adjusted=R_ad,
        use_adjusted=adjust,
        treatment_proportion=p,
        N=int(N),
        clamped=clamped or clamped_ad,
    )
