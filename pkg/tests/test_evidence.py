import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bootmi import Calibration, IncompleteDataset, RunConfig
from bootmi.detect import DetectionHistory, DetectionRow, LambdaRule
from bootmi.evidence import (
    IRRELEVANT,
    RELEVANT,
    UNDECIDED,
    CalibrationFallbackError,
    EvidenceDomainError,
    EvidenceState,
    SequencingError,
    bernoulli_kl,
    break_even,
    calibrate,
    calibrate_rates,
    classify,
    decision_threshold,
    drift,
    evidence_update,
    expected_stopping_time,
    log_increments,
    pilot_frequencies,
    run_sequential,
)

# high-precision values computed independently with mpmath (50 digits)
BREAK_EVEN_A = 0.629551029638880  # pi0=0.0687, pi1=0.99
BREAK_EVEN_B = 0.610859047575173  # pi0=0.102, pi1=0.974
UP_0687 = 2.66795574390033  # log(0.99/0.0687)
DOWN_0687 = -4.53399636653357  # log(0.01/0.9313)
KL_09_01 = 1.75777966186898


def cal_for(pi0, pi1):
    return Calibration(pi0, pi0, pi1, break_even(pi0, pi1), 0.0, 0.01, 0.5, False)


def feed(z_rows, cal, c=math.log(10), t_min=1):
    state = EvidenceState.fresh(len(z_rows[0]))
    for t, z in enumerate(z_rows, start=1):
        state = classify(evidence_update(state, DetectionRow(np.asarray(z, bool), t), cal), c, t_min)
    return state


# ---------------------------------------------------------------- closed forms

def test_break_even_reference_values():
    assert break_even(0.0687, 0.99) == pytest.approx(BREAK_EVEN_A, abs=1e-12)
    assert break_even(0.102, 0.974) == pytest.approx(BREAK_EVEN_B, abs=1e-12)


def test_log_increments_reference_values():
    up, down = log_increments(0.0687, 0.99)
    assert up == pytest.approx(UP_0687, abs=1e-12)
    assert down == pytest.approx(DOWN_0687, abs=1e-12)


def test_drift_is_zero_at_break_even_and_equals_kl_at_endpoints():
    pi0, pi1 = 0.1, 0.9
    assert drift(break_even(pi0, pi1), pi0, pi1) == pytest.approx(0.0, abs=1e-12)
    assert drift(pi1, pi0, pi1) == pytest.approx(KL_09_01, abs=1e-12)
    assert drift(pi0, pi0, pi1) == pytest.approx(-bernoulli_kl(pi0, pi1), abs=1e-12)
    assert bernoulli_kl(0.9, 0.1) == pytest.approx(KL_09_01, abs=1e-12)


def test_symmetric_pair_breaks_even_at_half():
    assert break_even(0.2, 0.8) == pytest.approx(0.5)


@given(pi1=st.floats(0.3, 0.999), a=st.floats(0.01, 0.98), b=st.floats(0.01, 0.98))
def test_break_even_increases_in_pi0(pi1, a, b):
    lo, hi = sorted((a * pi1, b * pi1))
    if hi - lo < 1e-6:
        return
    q_lo, q_hi = break_even(lo, pi1), break_even(hi, pi1)
    assert lo < q_lo < pi1
    assert q_lo < q_hi


def test_domain_errors():
    for pi0, pi1 in [(0.5, 0.5), (0.0, 0.9), (0.9, 0.1), (0.1, 1.0)]:
        with pytest.raises(EvidenceDomainError):
            break_even(pi0, pi1)
    with pytest.raises(EvidenceDomainError):
        drift(1.5, 0.1, 0.9)


def test_decision_threshold():
    assert decision_threshold(1, 1) == 0.0
    assert decision_threshold(9, 1) == pytest.approx(math.log(9))
    assert decision_threshold(1, 1, 0.9, 0.1) == pytest.approx(math.log(9))
    with pytest.raises(EvidenceDomainError):
        decision_threshold(0, 1)
    with pytest.raises(EvidenceDomainError):
        decision_threshold(1, 1, 0.6, 0.6)


def test_expected_stopping_time():
    assert expected_stopping_time(math.log(10), UP_0687) == pytest.approx(0.863052207015944, abs=1e-12)
    assert expected_stopping_time(2.0, -0.5) == 4.0
    with pytest.raises(EvidenceDomainError):
        expected_stopping_time(1.0, 0.0)


@given(c=st.floats(0.1, 10), mu=st.floats(0.01, 5), k=st.floats(0.1, 10))
def test_expected_stopping_time_is_homogeneous(c, mu, k):
    assert expected_stopping_time(k * c, k * mu) == pytest.approx(expected_stopping_time(c, mu))


# ---------------------------------------------------------------- calibration

def test_calibration_shrinks_toward_alpha():
    rates = [0.075, 0.075] + [0.3] * 8 + [0.99] * 10
    cal = calibrate_rates(rates, alpha=0.05, lambda0=0.25)
    assert cal.pi0_raw == pytest.approx(0.075)
    assert cal.pi0 == pytest.approx(0.06875, abs=1e-15)
    assert cal.pi1 == pytest.approx(0.99)
    assert not cal.fallback_triggered and not cal.qstar_floor_applied


def test_calibration_floor_and_pi1_cap():
    cal = calibrate_rates([0.0] * 4 + [0.5] * 6 + [1.0] * 10, alpha=1e-9, lambda0=0.0, pi0_min=0.01)
    assert cal.pi0 == pytest.approx(0.01)
    assert cal.pi1 == pytest.approx(1 - 1e-4)


def test_identical_rates_trigger_fallback():
    cal = calibrate_rates([0.3] * 20)
    assert cal.fallback_triggered


def test_qstar_floor_raises_pi0_by_bisection():
    rates = [0.01] * 2 + [0.2] * 8 + [0.6] * 10
    cal = calibrate_rates(rates, alpha=0.05, lambda0=0.25, qstar_min=0.5)
    assert cal.qstar_floor_applied and not cal.fallback_triggered
    assert cal.q_star >= 0.5
    assert cal.q_star == pytest.approx(0.5, abs=1e-5)
    assert cal.pi0 > cal.pi0_stabilized


def test_pilot_frequencies():
    z = np.zeros((20, 3), bool)
    z[:15, 1] = True
    rates = pilot_frequencies(DetectionHistory.from_matrix(z))
    np.testing.assert_array_equal(rates, [0.0, 0.75, 0.0])
    with pytest.raises(ValueError):
        pilot_frequencies(DetectionHistory(3))


def test_calibrate_uses_pilot_history_frequencies():
    z = np.zeros((10, 20), bool)
    z[:, 10:] = True
    z[0, 0] = True
    cal = calibrate(DetectionHistory.from_matrix(z))
    assert cal.pi1 == pytest.approx(1 - 1e-4)
    assert not cal.fallback_triggered


# ---------------------------------------------------------------- evidence walk

@settings(deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=4, max_size=4), min_size=1, max_size=40))
def test_log_evidence_is_additive(rows):
    cal = cal_for(0.1, 0.9)
    up, down = log_increments(cal.pi0, cal.pi1)
    z = np.array(rows)
    state = EvidenceState.fresh(4)
    for t, r in enumerate(z, start=1):
        state = evidence_update(state, DetectionRow(r, t), cal)
    hits = z.sum(0)
    np.testing.assert_allclose(state.log_e, hits * up + (len(z) - hits) * down, atol=1e-9)
    np.testing.assert_array_equal(state.detections, hits)


@settings(deadline=None)
@given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=40), st.integers(1, 10))
def test_decisions_are_absorbing_and_gated(rows, t_min):
    cal = cal_for(0.1, 0.9)
    c = math.log(10)
    state = EvidenceState.fresh(3)
    prev = state.status.copy()
    for t, r in enumerate(rows, start=1):
        state = classify(evidence_update(state, DetectionRow(np.array(r), t), cal), c, t_min)
        decided = prev != UNDECIDED
        np.testing.assert_array_equal(state.status[decided], prev[decided])
        if t < t_min:
            assert (state.status == UNDECIDED).all()
        newly = (prev == UNDECIDED) & (state.status != UNDECIDED)
        assert np.all(state.decided_at[newly] == t)
        assert np.all(state.status[newly] == np.where(state.log_e[newly] >= c, RELEVANT, IRRELEVANT))
        prev = state.status.copy()


def test_all_detections_decide_at_t_min():
    cal = cal_for(0.0687, 0.99)
    state = feed([[True, False]] * 5, cal, c=math.log(1000), t_min=5)
    assert state.status.tolist() == [RELEVANT, IRRELEVANT]
    assert state.decided_at.tolist() == [5, 5]
    assert state.all_decided


def test_boundary_is_inclusive():
    cal = cal_for(0.1, 0.9)
    up, _ = log_increments(cal.pi0, cal.pi1)
    state = feed([[True]] * 2, cal, c=2 * up)
    assert state.status[0] == RELEVANT


def test_out_of_order_row_is_rejected():
    cal = cal_for(0.1, 0.9)
    with pytest.raises(SequencingError):
        evidence_update(EvidenceState.fresh(2), DetectionRow(np.zeros(2, bool), 2), cal)


def test_update_refuses_fallback_calibration():
    with pytest.raises(EvidenceDomainError):
        evidence_update(EvidenceState.fresh(2), DetectionRow(np.zeros(2, bool), 1), calibrate_rates([0.3] * 20))


# ---------------------------------------------------------------- full procedure

def fast_config(**kw):
    base = dict(t_pilot=10, t_max=60, t_min=5, m_imputations=2, impute_sweeps=2)
    base.update(kw)
    return RunConfig(**base)


def copy_of_d_dataset(n=150, p=16, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(n)
    x = rng.standard_normal((n, p))
    x[:, 0] = d
    # a minority of controls enter the outcome so that the pilot rates
    # above the median come from relevant columns only
    y = d + x[:, 1:6].sum(1) + rng.standard_normal(n)
    mask = rng.random((n, p)) > 0.1
    mask[:, 0] = True
    return IncompleteDataset.from_arrays(y, d, x, x_mask=mask)


def test_copy_of_d_is_relevant_at_t_min():
    res = run_sequential(copy_of_d_dataset(), fast_config(), rng=1)
    assert res.status[0] == RELEVANT
    assert res.decided_at[0] == 5
    assert res.selected <= frozenset().union(*[s.s_union for s in res.selections])


def test_pure_noise_controls_are_mostly_irrelevant():
    rng = np.random.default_rng(3)
    n, p = 200, 20
    x = rng.standard_normal((n, p))
    d = 1.5 * x[:, 0] + 1.5 * x[:, 1] + rng.standard_normal(n)
    y = 0.5 * d + rng.standard_normal(n)
    ds = IncompleteDataset.from_arrays(y, d, x)
    res = run_sequential(ds, fast_config(t_max=100), rng=2)
    noise = res.status[2:]
    assert np.mean(noise == IRRELEVANT) >= 0.9
    assert res.status[0] == RELEVANT and res.status[1] == RELEVANT


def test_run_is_reproducible_and_paths_have_one_column_per_iteration():
    ds = copy_of_d_dataset(seed=4)
    a = run_sequential(ds, fast_config(), rng=7)
    b = run_sequential(ds, fast_config(), rng=7)
    np.testing.assert_array_equal(a.evidence_paths, b.evidence_paths)
    assert a.evidence_paths.shape == (ds.p, a.stop_iteration)
    assert len(a.history) == a.stop_iteration


def test_full_budget_fills_union_history_without_moving_the_stop():
    ds = copy_of_d_dataset(seed=5)
    short = run_sequential(ds, fast_config(), rng=3)
    full = run_sequential(ds, fast_config(), rng=3, full_budget=True)
    assert full.stop_iteration == short.stop_iteration
    assert len(full.union_history) == 60
    assert full.selected == short.selected


def test_fallback_after_one_pilot_extension():
    # a fixed huge penalty empties every candidate set, so all rates are zero
    ds = copy_of_d_dataset(seed=6)
    cfg = fast_config(lambda_rule=LambdaRule("fixed", value=1e6))
    with pytest.raises(CalibrationFallbackError) as info:
        run_sequential(ds, cfg, rng=0)
    err = info.value
    assert len(err.pilot_history) == 2 * cfg.t_pilot
    assert err.calibration.fallback_triggered
    assert set(err.frequency_sets()) == {"freq50", "freq75"}


def test_symmetric_walk_matches_exact_two_step_chain():
    # with pi=(0.1, 0.9) each step is +-log 9; at c = log 10 or log 30 two net
    # steps are needed, so the walk is a +-1 chain absorbed at +-2:
    # P(wrong side) = (1-q)^2 / (q^2 + (1-q)^2) and E[T] = 2 / (q^2 + (1-q)^2)
    cal = cal_for(0.1, 0.9)
    rng = np.random.default_rng(8)
    n = 50_000
    for q in (0.9, 0.95):
        both = q**2 + (1 - q) ** 2
        for c in (math.log(10), math.log(30)):
            state = EvidenceState.fresh(n)
            t = 0
            while not state.all_decided:
                t += 1
                state = classify(evidence_update(state, DetectionRow(rng.random(n) < q, t), cal), c, 1)
            assert np.mean(state.status == IRRELEVANT) == pytest.approx((1 - q) ** 2 / both, abs=0.002)
            assert state.decided_at.mean() == pytest.approx(2 / both, abs=0.02)
