from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bootmi.regress import (
    InsufficientObservationsError,
    SingularDesignError,
    cross_validate,
    fold_ids,
    lambda_max,
    lasso_fit,
    ols_fit,
    ols_fit_dropping,
    select_lambda_cv,
)


def exact_normal_equations(a, y):
    """Solve A'A b = A'y in rational arithmetic by Gauss-Jordan elimination."""
    a = [[Fraction(float(v)) for v in row] for row in a]
    y = [Fraction(float(v)) for v in y]
    k = len(a[0])
    m = [[sum(r[i] * r[j] for r in a) for j in range(k)] + [sum(r[i] * v for r, v in zip(a, y))] for i in range(k)]
    for c in range(k):
        piv = next(r for r in range(c, k) if m[r][c] != 0)
        m[c], m[piv] = m[piv], m[c]
        for r in range(k):
            if r != c and m[r][c] != 0:
                f = m[r][c] / m[c][c]
                m[r] = [u - f * v for u, v in zip(m[r], m[c])]
    return np.array([float(m[i][k] / m[i][i]) for i in range(k)])


# ---------------------------------------------------------------- OLS

def test_ols_exact_fit():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 2))
    y = 1.5 + 2.0 * x[:, 0] - 3.0 * x[:, 1]
    fit = ols_fit(x, y)
    np.testing.assert_allclose(fit.coefficients, [1.5, 2.0, -3.0], atol=1e-10)
    assert fit.residual_variance < 1e-20
    assert fit.df_resid == 27


def test_ols_orthogonal_response_has_zero_slope():
    x = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
    y = np.array([1.0, 1.0, 2.0, 2.0, 3.0, 3.0])
    fit = ols_fit(x, y)
    assert abs(fit.coefficients[1]) < 1e-12
    assert fit.p_values[1] == pytest.approx(1.0)


def test_ols_matches_rational_normal_equations():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((50, 3))
    y = x @ [0.3, -1.2, 2.0] + rng.standard_normal(50)
    oracle = exact_normal_equations(np.column_stack([np.ones(50), x]), y)
    np.testing.assert_allclose(ols_fit(x, y).coefficients, oracle, rtol=1e-8, atol=1e-8)


def test_ols_standard_errors_match_textbook_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 2))
    y = x[:, 0] + rng.standard_normal(40)
    a = np.column_stack([np.ones(40), x])
    fit = ols_fit(x, y)
    resid = y - a @ fit.coefficients
    cov = resid @ resid / 37 * np.linalg.inv(a.T @ a)
    np.testing.assert_allclose(fit.standard_errors, np.sqrt(np.diag(cov)), rtol=1e-10)


def test_ols_singular_design_names_dependent_column():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 2))
    x = np.column_stack([x, x[:, 0] + x[:, 1]])
    with pytest.raises(SingularDesignError):
        ols_fit(x, rng.standard_normal(20))


def test_ols_needs_more_rows_than_parameters():
    with pytest.raises(InsufficientObservationsError):
        ols_fit(np.ones((3, 2)) + np.eye(3, 2), np.arange(3.0))


def test_ols_dropping_keeps_earliest_columns():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((25, 2))
    design = np.column_stack([x, 2 * x[:, 0]])
    fit, kept = ols_fit_dropping(design, rng.standard_normal(25))
    assert kept == [0, 1]
    assert fit.coefficients.shape == (3,)


def test_null_p_values_are_uniform():
    rng = np.random.default_rng(5)
    p = np.array([ols_fit(rng.standard_normal((30, 3)), rng.standard_normal(30)).p_values[1] for _ in range(2000)])
    assert stats.kstest(p, "uniform").statistic < 0.05


# ---------------------------------------------------------------- LASSO

def kkt_residual(x, y, fit, penalize=None):
    """Largest KKT violation on the standardized scale."""
    n = x.shape[0]
    sd = x.std(0)
    xs = (x - x.mean(0)) / sd
    beta = fit.coefficients * sd
    grad = xs.T @ (y - y.mean() - xs @ beta) / n
    w = np.ones(x.shape[1]) if penalize is None else np.asarray(penalize, float)
    lam = fit.lam * w
    active = beta != 0
    viol = np.where(active, np.abs(grad - lam * np.sign(beta)), np.maximum(np.abs(grad) - lam, 0.0))
    return float(viol.max())


def test_lasso_kkt_on_random_instances():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((100, 10))
        y = x @ (rng.normal(0, 1, 10) * (rng.random(10) < 0.5)) + rng.standard_normal(100)
        lam = rng.uniform(0.02, 0.8) * lambda_max(x, y)
        worst = max(worst, kkt_residual(x, y, lasso_fit(x, y, lam)))
    assert worst < 1e-6


def test_lasso_kkt_with_unpenalized_column():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((80, 6))
    y = 0.2 * x[:, 0] + rng.standard_normal(80)
    pen = np.r_[0.0, np.ones(5)]
    fit = lasso_fit(x, y, 10.0, pen)
    assert fit.active_set == (0,)
    assert kkt_residual(x, y, fit, pen) < 1e-6


def test_lasso_is_null_at_lambda_max():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((60, 5))
    y = x[:, 0] + rng.standard_normal(60)
    lmax = lambda_max(x, y)
    assert lasso_fit(x, y, lmax * (1 + 1e-9)).active_set == ()
    assert lasso_fit(x, y, lmax * 0.9).active_set != ()


def test_lasso_soft_threshold_on_orthonormal_design():
    # standardized orthogonal design: the solution is the soft-thresholded correlation
    x = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    y = 2.0 * x[:, 0]
    fit = lasso_fit(x, y, 0.5)
    np.testing.assert_allclose(fit.coefficients, [1.5, 0.0], atol=1e-9)


def test_lasso_constant_column_gets_zero():
    rng = np.random.default_rng(9)
    x = np.column_stack([rng.standard_normal(50), np.full(50, 3.0)])
    fit = lasso_fit(x, x[:, 0] + rng.standard_normal(50), 0.05)
    assert fit.coefficients[1] == 0.0
    assert fit.constant_columns == (1,)


def test_lasso_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        lasso_fit(np.eye(4), np.arange(4.0), 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.01, 0.9))
def test_lasso_objective_never_increases_across_sweeps(seed, frac):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((40, 8))
    x[:, 1] = x[:, 0] + 0.1 * rng.standard_normal(40)
    y = x[:, 0] - x[:, 2] + rng.standard_normal(40)
    fit = lasso_fit(x, y, frac * lambda_max(x, y), trace=True)
    assert fit.converged
    assert np.all(np.diff(fit.objective_trace) <= 1e-12)


# ---------------------------------------------------------------- CV

def test_cv_on_noise_selects_nothing():
    rng = np.random.default_rng(10)
    empty = 0
    for _ in range(100):
        x = rng.standard_normal((100, 10))
        y = rng.standard_normal(100)
        lam = select_lambda_cv(x, y, rng=rng)
        empty += lasso_fit(x, y, lam).active_set == ()
    assert empty >= 90


def test_cv_finds_strong_signal():
    rng = np.random.default_rng(12)
    hits = 0
    for _ in range(100):
        x = rng.standard_normal((100, 10))
        y = 2.0 * x[:, 3] + rng.standard_normal(100)
        hits += 3 in lasso_fit(x, y, select_lambda_cv(x, y, rng=rng)).active_set
    assert hits >= 95


def test_cv_is_deterministic_given_seed():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((80, 6))
    y = x[:, 0] + rng.standard_normal(80)
    a = cross_validate(x, y, rng=42)
    b = cross_validate(x, y, rng=42)
    np.testing.assert_array_equal(a.cv_mean, b.cv_mean)
    assert a.lambda_1se >= a.lambda_min


def test_cv_degenerate_response_returns_positive_lambda():
    x = np.random.default_rng(14).standard_normal((30, 3))
    lam = select_lambda_cv(x, np.full(30, 2.0), rng=0)
    assert lam > 0
    assert lasso_fit(x, np.full(30, 2.0), lam).active_set == ()


def test_cv_needs_enough_rows():
    with pytest.raises(InsufficientObservationsError):
        cross_validate(np.random.default_rng(0).standard_normal((8, 2)), np.arange(8.0), folds=5)


@given(seed=st.integers(0, 2**32 - 1), n_groups=st.integers(5, 40))
def test_fold_ids_keep_groups_together(seed, n_groups):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, n_groups, 3 * n_groups)
    groups[:n_groups] = np.arange(n_groups)
    ids = fold_ids(groups.size, 5, rng, groups)
    for g in np.unique(groups):
        assert np.unique(ids[groups == g]).size == 1
    assert set(ids.tolist()) == set(range(5))


def test_fold_ids_balanced_without_groups():
    ids = fold_ids(103, 5, 0)
    counts = np.bincount(ids)
    assert counts.max() - counts.min() <= 1


def test_fold_ids_need_enough_groups():
    with pytest.raises(InsufficientObservationsError):
        fold_ids(10, 5, 0, groups=[0, 1, 2, 3] * 2 + [0, 1])
