"""Qini curves and area-under-Qini (AUQ) estimators.

On a uniformly sampled test set the top-t share is taken directly from the
ranked scores. On an HS-sampled set the cut-offs and the stratum mix within
each top share come from a reference set whose strata are in population
proportions, and the two strata are combined like the stratified ATE.

Ranking uses a stable sort of the scores (ties keep row order), so any
strictly increasing transform of the scores gives bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import DataError, SeedSpec, ValidationError, as_seed, ceil_count, round_half_up
from .estimation import diff_in_means, stratified_ate

CORRECTIONS = ("none", "hs", "covadj", "hs_covadj")


@dataclass(frozen=True, eq=False)
class QiniCurve:
    grid: np.ndarray
    q_values: np.ndarray
    ate_t: np.ndarray
    variance_hat: np.ndarray
    correction: str = "none"
    missing: np.ndarray = field(default=None)
    p_H_t: np.ndarray | None = None

    def to_rows(self) -> list[dict]:
        return [
            {"t": float(t), "ate_t": float(a), "q": float(q), "variance_hat": float(v)}
            for t, a, q, v in zip(self.grid, self.ate_t, self.q_values, self.variance_hat)
        ]


@dataclass(frozen=True)
class AuqResult:
    value: float
    estimator: str
    T: int | None = None


def _grid(T: int) -> np.ndarray:
    if T < 1:
        raise ValidationError("grid size T must be >= 1")
    return np.arange(1, T + 1) / T


def _descending_rank(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    rank = np.empty(scores.shape[0], dtype=np.int64)
    rank[order] = np.arange(scores.shape[0])
    return rank


def _check_inputs(scores, outcome, treatment, adjusted_outcome):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(outcome, dtype=float) if adjusted_outcome is None else np.asarray(adjusted_outcome, dtype=float)
    w = np.asarray(treatment)
    if not (s.shape == y.shape == w.shape) or s.ndim != 1:
        raise ValidationError("scores, outcome and treatment must be vectors of equal length")
    if s.size == 0:
        raise ValidationError("empty test set")
    return s, y, w


def qini_curve(
    scores,
    outcome,
    treatment,
    T: int = 10,
    adjusted_outcome=None,
    exact_scaling: bool = False,
) -> QiniCurve:
    """Qini curve Q(t) = ATE_t * t on a uniformly sampled test set.

    ``adjusted_outcome`` (y - phi) replaces the raw outcome when given.
    With ``exact_scaling`` the factor t becomes N_w(t) / (p * N).
    Points whose top set lacks an arm are NaN and flagged in ``missing``.
    """
    s, y, w = _check_inputs(scores, outcome, treatment, adjusted_outcome)
    n = s.size
    grid = _grid(T)
    rank = _descending_rank(s)
    p_all = (w == 1).mean()
    ate = np.full(T, np.nan)
    var = np.full(T, np.nan)
    q = np.full(T, np.nan)
    missing = np.zeros(T, dtype=bool)
    for j, t in enumerate(grid):
        top = rank < ceil_count(t, n)
        try:
            est = diff_in_means(y[top], w[top])
        except DataError:
            missing[j] = True
            continue
        ate[j], var[j] = est.value, est.variance_hat
        scale = (w[top] == 1).sum() / (p_all * n) if exact_scaling else t
        q[j] = est.value * scale
    correction = "none" if adjusted_outcome is None else "covadj"
    return QiniCurve(grid, q, ate, var, correction, missing)


def _reference_cutoffs(ref_scores: np.ndarray, T: int) -> np.ndarray:
    """Score cut-offs for top shares 1/T .. 1 on the reference set (last is -inf)."""
    desc = np.sort(ref_scores)[::-1]
    n = desc.size
    cut = np.empty(T)
    for j in range(1, T + 1):
        cut[j - 1] = -np.inf if j == T else desc[ceil_count(j / T, n) - 1]
    return cut


def hs_qini_curve(
    scores,
    outcome,
    treatment,
    labels,
    reference_scores,
    reference_labels,
    T: int = 10,
    adjusted_outcome=None,
) -> QiniCurve:
    """Qini curve on an HS-sampled test set.

    Cut-offs and p_{H,t} are computed on the reference set (population
    features or a proportionally down-sampled copy of the test set); the
    test rows above each cut-off give per-stratum differences in means
    that are combined with weights p_{H,t} and 1 - p_{H,t}.
    """
    s, y, w = _check_inputs(scores, outcome, treatment, adjusted_outcome)
    high = np.asarray(labels, dtype=bool)
    ref_s = np.asarray(reference_scores, dtype=float)
    ref_h = np.asarray(reference_labels, dtype=bool)
    if ref_s.shape != ref_h.shape or ref_s.size == 0:
        raise ValidationError("reference scores and labels must be non-empty and of equal length")
    grid = _grid(T)
    cut = _reference_cutoffs(ref_s, T)
    ate = np.full(T, np.nan)
    var = np.full(T, np.nan)
    q = np.full(T, np.nan)
    pht = np.full(T, np.nan)
    missing = np.zeros(T, dtype=bool)
    for j, t in enumerate(grid):
        ref_top = ref_s >= cut[j]
        p_ht = float(ref_h[ref_top].mean())
        pht[j] = p_ht
        top = s >= cut[j]
        try:
            est = stratified_ate(y[top], w[top], high[top], p_ht)
        except DataError:
            missing[j] = True
            continue
        ate[j], var[j] = est.value, est.variance_hat
        q[j] = est.value * t
    correction = "hs" if adjusted_outcome is None else "hs_covadj"
    return QiniCurve(grid, q, ate, var, correction, missing, pht)


def downsample_reference(labels, population_p_H: float, seed: SeedSpec | int | None = None) -> np.ndarray:
    """Row indices of an HS set with S_H randomly thinned to population proportions."""
    high = np.asarray(labels, dtype=bool)
    H = np.flatnonzero(high)
    L = np.flatnonzero(~high)
    if not 0 <= population_p_H < 1:
        raise ValidationError("population p_H must lie in [0, 1)")
    n_H = round_half_up(L.size * population_p_H / (1 - population_p_H))
    if n_H > H.size:
        raise DataError("HS set holds fewer S_H rows than population proportions require")
    keep = as_seed(seed, "downsample").rng().choice(H, size=n_H, replace=False)
    return np.sort(np.concatenate([keep, L]))


def truth_qini_curve(scores, tau, T: int = 10) -> np.ndarray:
    """E[tau | top t] * t on a (large) sample with known CATE."""
    s = np.asarray(scores, dtype=float)
    tau = np.asarray(tau, dtype=float)
    rank = _descending_rank(s)
    out = np.empty(T)
    for j, t in enumerate(_grid(T)):
        out[j] = tau[rank < ceil_count(t, s.size)].mean() * t
    return out


# --------------------------------------------------------------------------- AUQ


def auq_oracle(scores, tau) -> AuqResult:
    """mean(F(score) * tau) with F the midrank empirical CDF of the scores."""
    s = np.asarray(scores, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if s.shape != tau.shape or s.size == 0:
        raise ValidationError("scores and tau must be non-empty vectors of equal length")
    F = rankdata(s, method="average") / s.size
    return AuqResult(float(np.mean(F * tau)), "oracle_cdf")


def auq_decile(
    scores,
    outcome,
    treatment,
    T: int = 100,
    adjusted_outcome=None,
    labels=None,
    reference_scores=None,
    reference_labels=None,
) -> AuqResult:
    """AUQ from T rank segments: (1/T) * sum_b (T - b)/T * ATE(segment b).

    Segment b = 0 is the top-ranked 1/T of the test set. The HS form
    (``labels`` and a reference given) takes segment boundaries and stratum
    weights from the reference and weights each segment by its reference share.
    """
    s, y, w = _check_inputs(scores, outcome, treatment, adjusted_outcome)
    if T < 1:
        raise ValidationError("T must be >= 1")
    weights = (T - np.arange(T)) / T
    if labels is None:
        rank = _descending_rank(s)
        n = s.size
        bounds = [ceil_count(b / T, n) for b in range(T + 1)]
        total = 0.0
        for b in range(T):
            seg = (rank >= bounds[b]) & (rank < bounds[b + 1])
            if not seg.any():
                continue
            try:
                est = diff_in_means(y[seg], w[seg])
            except DataError:
                return AuqResult(float("nan"), "decile", T)
            total += weights[b] * est.value / T
        return AuqResult(float(total), "decile", T)

    if reference_scores is None or reference_labels is None:
        raise ValidationError("HS-corrected AUQ needs reference scores and labels")
    high = np.asarray(labels, dtype=bool)
    ref_s = np.asarray(reference_scores, dtype=float)
    ref_h = np.asarray(reference_labels, dtype=bool)
    cut = _reference_cutoffs(ref_s, T)
    upper = np.concatenate([[np.inf], cut[:-1]])
    total = 0.0
    for b in range(T):
        in_ref = (ref_s >= cut[b]) & (ref_s < upper[b]) if b else ref_s >= cut[b]
        share = in_ref.mean()
        if share == 0:
            continue
        seg = (s >= cut[b]) & (s < upper[b]) if b else s >= cut[b]
        try:
            est = stratified_ate(y[seg], w[seg], high[seg], float(ref_h[in_ref].mean()))
        except DataError:
            return AuqResult(float("nan"), "decile", T)
        total += weights[b] * share * est.value
    return AuqResult(float(total), "decile", T)
