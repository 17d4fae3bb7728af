import logging
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from hsd.data import DataError, ValidationError
from hsd.design import (
    DesignCurve,
    DesignPoint,
    SamplingPlan,
    design_curve,
    optimal_oversampling_ratio,
    predicted_variance_ratio,
    safe_oversampling_bound,
    select_plan,
    stratified_variance,
    stratum_threshold,
    stratum_variance_estimates,
)

shares = st.floats(0.001, 0.999)
quotients = st.floats(1.0, 1e4)


def test_variance_estimates_hand_example():
    assert stratum_variance_estimates([0.1, 0.1, 0.1, 0.5], 0.25) == pytest.approx((0.25, 0.09))
    assert stratum_threshold([0.1, 0.1, 0.1, 0.5], 0.25) == 0.1


def test_constant_predictions_have_empty_stratum():
    with pytest.raises(DataError, match="p_H"):
        stratum_variance_estimates(np.full(50, 0.3), 0.2)


def test_uniform_predictions_half_split():
    u = np.random.default_rng(0).random(200_000)
    V_H, V_L = stratum_variance_estimates(u, 0.5)
    assert V_H == pytest.approx(0.1875, abs=2e-3)
    assert V_L == pytest.approx(0.1875, abs=2e-3)
    curve = design_curve(u, [0.5])
    assert len(curve) == 1
    assert curve[0].Q_V_hat == pytest.approx(1.0, abs=0.02)


def test_threshold_convention_ties_stay_low():
    pred = np.array([0.1, 0.2, 0.2, 0.2, 0.9])
    # ceil(0.6 * 5) = 3rd order statistic = 0.2; only values strictly above go high
    assert stratum_threshold(pred, 0.4) == 0.2
    V_H, _ = stratum_variance_estimates(pred, 0.4)
    assert V_H == pytest.approx(0.9 * 0.1)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_share_out_of_range(bad):
    with pytest.raises(ValidationError):
        optimal_oversampling_ratio(bad, 2.0)
    with pytest.raises(ValidationError):
        stratum_variance_estimates([0.1, 0.2], bad)


def test_closed_form_examples():
    assert optimal_oversampling_ratio(0.1, 4.0) == pytest.approx(1 / 0.55)
    assert optimal_oversampling_ratio(0.5, 9.0) == pytest.approx(1.5)
    assert predicted_variance_ratio(0.1, 4.0) == pytest.approx(1.21 / 1.3)
    assert safe_oversampling_bound(0.1, 4.0) == pytest.approx(1 / 0.325)
    for p in (0.01, 0.3, 0.77):
        assert optimal_oversampling_ratio(p, 1.0) == 1.0
        assert predicted_variance_ratio(p, 1.0) == 1.0
        assert safe_oversampling_bound(p, 1.0) == 1.0


def test_safe_bound_rejects_inverted_strata():
    with pytest.raises(ValidationError):
        safe_oversampling_bound(0.2, 0.5)
    with pytest.raises(ValidationError):
        optimal_oversampling_ratio(0.2, 0.0)


@given(shares, quotients)
def test_ratio_and_R_bounds(p_H, Q):
    R = optimal_oversampling_ratio(p_H, Q)
    ratio = predicted_variance_ratio(p_H, Q)
    assert R >= 1 - 1e-12
    assert 0 < ratio <= 1 + 1e-12
    assert R * p_H <= 1 + 1e-12
    assert safe_oversampling_bound(p_H, Q) >= R * (1 - 1e-12)
    if Q > 1 + 1e-6:
        assert R > 1 and ratio < 1


@given(shares, quotients, st.floats(1.0, 100.0))
def test_ratio_monotone_in_quotient(p_H, Q, factor):
    assert predicted_variance_ratio(p_H, Q * factor) <= predicted_variance_ratio(p_H, Q) + 1e-12


@given(shares, st.floats(1.0, 50.0))
def test_optimal_ratio_minimises_stratified_variance(p_H, Q):
    R = optimal_oversampling_ratio(p_H, Q)
    best = stratified_variance(R * p_H, p_H, Q, 1.0)
    proportional = stratified_variance(p_H, p_H, Q, 1.0)
    assert best / proportional == pytest.approx(predicted_variance_ratio(p_H, Q), rel=1e-9)
    for eps in (-1e-3, 1e-3):
        share = R * p_H + eps
        if 0 < share < 1:
            assert stratified_variance(share, p_H, Q, 1.0) >= best * (1 - 1e-12)


@given(shares, st.floats(1.0, 50.0), st.floats(1.0, 3.0))
def test_safe_interval_never_hurts(p_H, Q, scale):
    bound = safe_oversampling_bound(p_H, Q)
    R = 1 + (bound - 1) * min(scale - 1, 1.0)
    assume(R * p_H < 1)
    assert stratified_variance(R * p_H, p_H, Q, 1.0) <= stratified_variance(p_H, p_H, Q, 1.0) * (1 + 1e-9)


def test_curve_homoskedastic_limit():
    pred = 0.3 + 1e-6 * np.random.default_rng(1).random(10_000)
    curve = design_curve(pred)
    assert len(curve) == 99
    assert all(pt.Q_V_hat == pytest.approx(1.0, abs=1e-4) for pt in curve)
    assert all(pt.predicted_ratio == pytest.approx(1.0, abs=1e-8) for pt in curve)


def test_curve_threshold_monotone_and_invariants():
    pred = np.random.default_rng(2).beta(0.5, 8, 20_000)
    curve = design_curve(pred)
    thr = [pt.threshold for pt in curve]
    assert all(a >= b for a, b in zip(thr, thr[1:]))
    for pt in curve:
        assert 0 < pt.V_H_hat <= 0.25 and 0 < pt.V_L_hat <= 0.25
        if pt.Q_V_hat >= 1:
            assert pt.R_H >= 1 and 0 < pt.predicted_ratio <= 1


def test_curve_skips_infeasible_and_fails_without_spread(caplog):
    pred = np.r_[np.zeros(99), 0.5]
    with pytest.raises(DataError):
        design_curve(pred)
    mixed = np.r_[np.full(600, 0.9), 0.8 * np.random.default_rng(3).random(400)]
    with caplog.at_level(logging.WARNING, logger="hsd.design"):
        curve = design_curve(mixed)
    assert len(curve.skipped) == 59
    tied_low = np.r_[np.full(500, 0.2), np.random.default_rng(3).random(500)]
    with caplog.at_level(logging.WARNING, logger="hsd.design"):
        design_curve(tied_low)
    assert "tied" in caplog.text


def test_select_plan_adjusts_share():
    pred = np.random.default_rng(4).beta(0.5, 8, 50_000)
    curve = design_curve(pred, [0.04])
    plan = select_plan(curve, 1000, 0.5, adjust=True)
    assert plan.p_H == 0.04
    assert plan.p_H_adjusted == pytest.approx(0.05)
    at_ad = curve.point_at(0.05)
    assert plan.R_H_adjusted == pytest.approx(0.75 * at_ad.R_H + 0.25)
    assert plan.threshold_adjusted == at_ad.threshold
    assert plan.effective_p_H == plan.p_H_adjusted
    assert select_plan(curve, 1000, 0.5, adjust=False).effective_R_H == plan.R_H


def test_adjusted_ratio_table_back_calculation():
    assert 0.75 * 5.533 + 0.25 == pytest.approx(4.4, abs=0.01)


def test_adjusted_share_is_capped():
    pred = np.random.default_rng(5).random(10_000)
    plan = select_plan(design_curve(pred, [0.45]), 100)
    assert plan.p_H_adjusted == 0.5


def test_adjusted_ratio_inside_interval_on_realistic_curve():
    pred = np.random.default_rng(6).beta(0.3, 10, 100_000)
    plan = select_plan(design_curve(pred), 20_000)
    assert plan.R_H > 1
    assert 1 < plan.R_H_adjusted < plan.R_H


def _flat_point(p_H):
    return DesignPoint(p_H, 0.5, 0.25, 0.25, 1.0, 1.0, 1.0)


def test_no_signal_plan_is_proportional():
    curve = DesignCurve([_flat_point(0.4), _flat_point(0.5)], [], None)
    plan = select_plan(curve, 100)
    assert plan.p_H == 0.4  # ties go to the smaller share
    assert plan.R_H_adjusted == 1.0


def test_plan_json_round_trip():
    plan = SamplingPlan.proportional(0.2, 0.1, 500, 0.85)
    back = SamplingPlan.from_dict(__import__("json").loads(plan.to_json()))
    assert back == plan
    with pytest.raises(ValidationError):
        SamplingPlan.proportional(0.2, 0.1, 0)


def test_stratified_variance_formula():
    assert stratified_variance(0.5, 0.2, 4.0, 1.0, 100) == pytest.approx(0.04 * 4 / 50 + 0.64 / 50)
    assert math.isclose(stratified_variance(0.2, 0.2, 1.0, 1.0), 1.0)
