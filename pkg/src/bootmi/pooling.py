"""Rubin's-rules pooling of the treatment coefficient across imputations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import IncompleteDataset
from .perturb import impute_m
from .regress import ols_fit_dropping


class InsufficientImputationsError(ValueError):
    pass


@dataclass(frozen=True)
class PooledEstimate:
    q_bar: float
    u_bar: float
    b: float
    t_var: float
    m: int
    ci_low: float
    ci_high: float
    level: float

    @property
    def se(self) -> float:
        return math.sqrt(self.t_var)


def rubin_pool(estimates, variances, level: float = 0.95) -> PooledEstimate:
    """Combine per-imputation estimates with Rubin's rules.

    The interval uses a normal critical value, Q_bar +- z * sqrt(T).
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.size
    if m < 2:
        raise InsufficientImputationsError("Rubin pooling needs at least two imputations")
    if u.shape != q.shape:
        raise ValueError("estimates and variances must have the same length")
    if np.any(u < 0):
        raise ValueError("variances must be nonnegative")
    q_bar = float(q.mean())
    u_bar = float(u.mean())
    b = float(q.var(ddof=1)) if np.ptp(q) > 0 else 0.0
    t_var = u_bar + (1.0 + 1.0 / m) * b
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * math.sqrt(t_var)
    return PooledEstimate(q_bar, u_bar, b, t_var, m, q_bar - half, q_bar + half, level)


def _d_coefficient(completed, selected) -> tuple[float, float]:
    cols = sorted(selected)
    design = np.column_stack([completed.d, completed.x[:, cols]]) if cols else completed.d[:, None]
    fit, kept = ols_fit_dropping(design, completed.y)
    if 0 not in kept:
        raise ValueError("D is collinear with the intercept")
    return float(fit.coefficients[1]), float(fit.standard_errors[1] ** 2)


def final_estimates(dataset: IncompleteDataset, selected_sets: dict, m: int = 10, level: float = 0.95, rng=None, impute_sweeps: int = 5) -> dict[str, PooledEstimate]:
    """Pool the D coefficient of ``Y ~ 1 + D + X[selected]`` for several
    control sets over one shared set of ``m`` imputations of the original data."""
    if m < 2:
        raise InsufficientImputationsError("need m >= 2")
    completions = impute_m(dataset, m, rng, impute_sweeps)
    out = {}
    for name, sel in selected_sets.items():
        pairs = [_d_coefficient(c, sel) for c in completions]
        out[name] = rubin_pool([e for e, _ in pairs], [v for _, v in pairs], level)
    return out


def final_estimate(dataset: IncompleteDataset, selected, m: int = 10, level: float = 0.95, rng=None, impute_sweeps: int = 5) -> PooledEstimate:
    return final_estimates(dataset, {"selected": selected}, m, level, rng, impute_sweeps)["selected"]
