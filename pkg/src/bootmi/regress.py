"""Regression kernels: OLS with classical inference and LASSO by coordinate descent.

The LASSO solver works in covariance mode on an internally standardized
design (column mean 0, ``(1/n) x'x = 1``) with a centered response, so a
full regularization path for a 50-column design costs a few hundred
microseconds. Intercepts are never penalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit
from scipy import stats

CD_TOL = 1e-7
CD_MAX_SWEEPS = 10_000


class RegressionError(ValueError):
    pass


class InsufficientObservationsError(RegressionError):
    pass


class SingularDesignError(RegressionError):
    """Design is rank deficient after intercept augmentation.

    ``column`` is the index (into the design, not counting the intercept) of
    a column that is linearly dependent on the others, or -1 when the
    intercept itself is the dependent direction.
    """

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"design column {column} is linearly dependent on the others")


@dataclass(frozen=True)
class OlsFit:
    """Least-squares fit; index 0 of every vector is the intercept."""

    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_statistics: np.ndarray
    p_values: np.ndarray
    residual_variance: float
    n_obs: int
    df_resid: int


@dataclass(frozen=True)
class LassoFit:
    coefficients: np.ndarray
    intercept: float
    lam: float
    active_set: tuple[int, ...]
    n_sweeps: int
    converged: bool
    constant_columns: tuple[int, ...] = ()
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))


# --------------------------------------------------------------------------
# OLS


def _augment(design: np.ndarray) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    return np.column_stack([np.ones(design.shape[0]), design])


def ols_fit(design, response) -> OlsFit:
    """Fit ``response ~ 1 + design`` by pivoted QR.

    Standard errors are the classical homoscedastic ones and p-values are
    two-sided from the t distribution with ``n - k - 1`` degrees of freedom.
    """
    a = _augment(design)
    y = np.asarray(response, dtype=float)
    n, k1 = a.shape
    if n <= k1:
        raise InsufficientObservationsError(
            f"need more than {k1} observations for {k1 - 1} regressors plus intercept, got {n}"
        )
    q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, k1) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < k1:
        raise SingularDesignError(int(piv[rank]) - 1)

    qty = q.T @ y
    beta_p = scipy.linalg.solve_triangular(r, qty)
    rinv = scipy.linalg.solve_triangular(r, np.eye(k1))
    unscaled_p = np.einsum("ij,ij->i", rinv, rinv)
    coef = np.empty(k1)
    coef[piv] = beta_p
    unscaled = np.empty(k1)
    unscaled[piv] = unscaled_p

    resid = y - a @ coef
    df = n - k1
    sigma2 = float(resid @ resid) / df
    se = np.sqrt(sigma2 * unscaled)
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.sign(coef) * np.inf)
    tstat = np.where((se == 0) & (coef == 0), 0.0, tstat)
    pvals = 2.0 * stats.t.sf(np.abs(tstat), df)
    return OlsFit(coef, se, tstat, np.clip(pvals, 0.0, 1.0), sigma2, n, df)


def independent_columns(design) -> list[int]:
    """Greedy maximal set of design columns, in index order, that stays full
    rank together with the intercept. Earlier columns win ties."""
    a = _augment(design)
    kept: list[int] = []
    for col in range(a.shape[1] - 1):
        trial = a[:, [0] + [c + 1 for c in kept] + [col + 1]]
        if np.linalg.matrix_rank(trial) == trial.shape[1]:
            kept.append(col)
    return kept


def ols_fit_dropping(design, response) -> tuple[OlsFit, list[int]]:
    """``ols_fit`` that drops linearly dependent columns instead of failing.

    Returns the fit on the kept columns and the list of kept column indices.
    Columns are kept lowest index first.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    try:
        return ols_fit(design, response), list(range(design.shape[1]))
    except SingularDesignError:
        kept = independent_columns(design)
        return ols_fit(design[:, kept], response), kept


# --------------------------------------------------------------------------
# LASSO


@njit(cache=True)
def _cd_cov(gram, corr, yy, lam, weights, beta, tol, max_sweeps, trace):
    """Cyclic coordinate descent in covariance mode; updates ``beta`` in place.

    Minimizes 0.5 * (yy - 2 corr'b + b'Gb) + lam * sum(w |b|). Returns the
    number of sweeps performed. If ``trace`` is nonempty, the objective after
    each sweep is written into it.
    """
    p = gram.shape[0]
    grad = corr.copy()
    for k in range(p):
        bk = beta[k]
        if bk != 0.0:
            for l in range(p):
                grad[l] -= gram[l, k] * bk
    sweeps = 0
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for k in range(p):
            gkk = gram[k, k]
            if gkk <= 0.0:
                continue
            old = beta[k]
            z = grad[k] + gkk * old
            thr = lam * weights[k]
            if z > thr:
                new = (z - thr) / gkk
            elif z < -thr:
                new = (z + thr) / gkk
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                beta[k] = new
                for l in range(p):
                    grad[l] -= gram[l, k] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        sweeps += 1
        if sweep < trace.shape[0]:
            obj = 0.5 * yy
            pen = 0.0
            for k in range(p):
                obj -= 0.5 * beta[k] * (corr[k] + grad[k])
                pen += weights[k] * abs(beta[k])
            trace[sweep] = obj + lam * pen
        if max_delta < tol:
            break
    return sweeps


@njit(cache=True)
def _cd_path(gram, corr, yy, lams, weights, tol, max_sweeps):
    """Warm-started solutions along a decreasing penalty grid."""
    p = gram.shape[0]
    out = np.zeros((lams.shape[0], p))
    beta = np.zeros(p)
    empty = np.zeros(0)
    for i in range(lams.shape[0]):
        _cd_cov(gram, corr, yy, lams[i], weights, beta, tol, max_sweeps, empty)
        out[i, :] = beta
    return out


@dataclass
class _System:
    """Standardized normal-equation pieces for one (sub)sample."""

    gram: np.ndarray
    corr: np.ndarray
    yy: float
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float
    constant: np.ndarray


def _system_from_sums(n, sx, sy, xtx, xty, yty) -> _System:
    x_mean = sx / n
    y_mean = sy / n
    cov = xtx / n - np.outer(x_mean, x_mean)
    var = np.diag(cov).copy()
    second = np.diag(xtx) / n
    constant = var <= 1e-12 * np.maximum(second, 1e-300)
    sd = np.sqrt(np.where(constant, 1.0, var))
    gram = cov / np.outer(sd, sd)
    gram[constant, :] = 0.0
    gram[:, constant] = 0.0
    corr = (xty / n - x_mean * y_mean) / sd
    corr[constant] = 0.0
    yy = yty / n - y_mean**2
    return _System(np.ascontiguousarray(gram), corr, max(yy, 0.0), x_mean, sd, y_mean, constant)


def _system(x: np.ndarray, y: np.ndarray) -> _System:
    n = x.shape[0]
    return _system_from_sums(n, x.sum(0), y.sum(), x.T @ x, x.T @ y, y @ y)


def _weights(p: int, penalize, constant: np.ndarray) -> np.ndarray:
    w = np.ones(p) if penalize is None else np.asarray(penalize, dtype=float).copy()
    if w.shape != (p,):
        raise ValueError(f"penalize must have length {p}")
    w[constant] = 1.0
    return w


def _lambda_max(sys: _System, weights: np.ndarray) -> float:
    """Smallest penalty at which every penalized coefficient is zero."""
    beta = np.zeros(sys.gram.shape[0])
    free = weights == 0
    if free.any():
        _cd_cov(sys.gram, sys.corr, sys.yy, 1e300, weights, beta, CD_TOL * 1e-3, CD_MAX_SWEEPS, np.zeros(0))
    grad = sys.corr - sys.gram @ beta
    pen = (weights > 0) & ~sys.constant
    if not pen.any():
        return 0.0
    return float(np.max(np.abs(grad[pen])))


def lasso_fit(design, response, lam: float, penalize=None, *, trace: bool = False) -> LassoFit:
    """Solve ``(1/2n)||y - Xb||^2 + lam * ||b||_1`` on the standardized scale.

    ``penalize`` is an optional 0/1 vector; zero entries are fitted without
    penalty. Columns with zero variance are excluded and get coefficient 0.
    Coefficients are returned on the original scale.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(response, dtype=float)
    # centering first keeps the Gram computation well conditioned
    xc = x - x.mean(0)
    yc = y - y.mean()
    sys = _system(xc, yc)
    p = x.shape[1]
    w = _weights(p, penalize, sys.constant)
    beta = np.zeros(p)
    tr = np.zeros(CD_MAX_SWEEPS if trace else 0)
    sweeps = _cd_cov(sys.gram, sys.corr, sys.yy, float(lam), w, beta, CD_TOL, CD_MAX_SWEEPS, tr)
    coef = beta / sys.x_sd
    coef[sys.constant] = 0.0
    intercept = float(y.mean() - x.mean(0) @ coef)
    active = tuple(int(k) for k in np.flatnonzero(coef))
    return LassoFit(
        coefficients=coef,
        intercept=intercept,
        lam=float(lam),
        active_set=active,
        n_sweeps=int(sweeps),
        converged=sweeps < CD_MAX_SWEEPS,
        constant_columns=tuple(int(k) for k in np.flatnonzero(sys.constant)),
        objective_trace=tr[:sweeps],
    )


def lambda_max(design, response, penalize=None) -> float:
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(response, dtype=float)
    sys = _system(x - x.mean(0), y - y.mean())
    return _lambda_max(sys, _weights(x.shape[1], penalize, sys.constant))


def fold_ids(n: int, folds: int, rng, groups=None) -> np.ndarray:
    """Balanced random fold labels; rows sharing a ``groups`` label share a fold."""
    rng = np.random.default_rng(rng)
    if groups is None:
        out = np.empty(n, dtype=np.int64)
        out[rng.permutation(n)] = np.arange(n) % folds
        return out
    labels, inverse = np.unique(np.asarray(groups), return_inverse=True)
    if labels.size < folds:
        raise InsufficientObservationsError(f"need at least {folds} distinct groups")
    group_fold = np.empty(labels.size, dtype=np.int64)
    group_fold[rng.permutation(labels.size)] = np.arange(labels.size) % folds
    return group_fold[inverse]


@dataclass(frozen=True)
class CvResult:
    lambdas: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    lambda_min: float
    lambda_1se: float


def cross_validate(design, response, folds: int = 5, grid_size: int = 50, rng=None, penalize=None, groups=None) -> CvResult:
    """K-fold CV error over a log-spaced grid from lambda_max to 1e-3 lambda_max.

    Rows sharing a ``groups`` label always land in the same fold, which keeps
    bootstrap duplicates from appearing on both sides of a split.
    """
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if n < 2 * folds:
        raise InsufficientObservationsError(f"need at least {2 * folds} rows for {folds}-fold CV")
    rng = np.random.default_rng(rng)

    xc = x - x.mean(0)
    yc = y - y.mean()
    xtx = xc.T @ xc
    xty = xc.T @ yc
    sx = xc.sum(0)
    sy = yc.sum()
    yty = yc @ yc
    full = _system_from_sums(n, sx, sy, xtx, xty, yty)
    w = _weights(p, penalize, full.constant)
    lmax = _lambda_max(full, w)
    if lmax <= 0.0 or full.yy <= 1e-14 * max(float(np.mean(y**2)), 1e-300):
        # degenerate: any positive penalty gives the null model
        lmax = max(lmax, 1.0)
        lams = np.array([lmax])
        return CvResult(lams, np.zeros(1), np.zeros(1), lmax, lmax)
    lams = np.geomspace(lmax, 1e-3 * lmax, grid_size)

    fold_id = fold_ids(n, folds, rng, groups)
    errs = np.empty((folds, grid_size))
    for f in range(folds):
        te = fold_id == f
        xt, yt = xc[te], yc[te]
        ntr = n - xt.shape[0]
        sys = _system_from_sums(
            ntr, sx - xt.sum(0), sy - yt.sum(), xtx - xt.T @ xt, xty - xt.T @ yt, yty - yt @ yt
        )
        wf = _weights(p, penalize, sys.constant)
        betas = _cd_path(sys.gram, sys.corr, sys.yy, lams, wf, CD_TOL, CD_MAX_SWEEPS)
        coefs = betas / sys.x_sd
        coefs[:, sys.constant] = 0.0
        pred = sys.y_mean + (xt - sys.x_mean) @ coefs.T
        errs[f] = np.mean((yt[:, None] - pred) ** 2, axis=0)

    mean = errs.mean(0)
    se = errs.std(0, ddof=1) / np.sqrt(folds)
    i_min = int(np.argmin(mean))
    ok = np.flatnonzero(mean <= mean[i_min] + se[i_min])
    return CvResult(lams, mean, se, float(lams[i_min]), float(lams[ok.min()]))


def select_lambda_cv(design, response, folds: int = 5, grid_size: int = 50, rng=None, penalize=None, rule: str = "1se", groups=None) -> float:
    """Penalty chosen by K-fold cross-validation.

    ``rule="1se"`` returns the largest grid value whose mean CV error is
    within one standard error of the minimum; ``rule="min"`` returns the
    minimizer.
    """
    res = cross_validate(design, response, folds, grid_size, rng, penalize, groups)
    if rule == "1se":
        return res.lambda_1se
    if rule == "min":
        return res.lambda_min
    raise ValueError(f"unknown CV rule {rule!r}")
