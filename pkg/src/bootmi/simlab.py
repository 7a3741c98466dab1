"""Monte Carlo lab: partially linear design, missingness mechanisms, scenario runs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import bisect
from scipy.special import expit

from .benchmarks import fixed_budget_sets, matched_budget_sets
from .config import RunConfig
from .dataset import IncompleteDataset
from .evidence import run_sequential
from .pooling import final_estimates
from .seeding import as_seed_sequence, child, child_rng

log = logging.getLogger(__name__)

MECHANISMS = ("MCAR", "MAR", "MNAR")
METHODS = ("proposed", "union", "freq50", "freq75", "union_matched", "freq50_matched", "freq75_matched")


class CalibrationError(RuntimeError):
    pass


class ScenarioAbortError(RuntimeError):
    pass


@dataclass(frozen=True)
class DgpSpec:
    n: int = 500
    p: int = 50
    k0: int = 5
    target_r2: float = 0.6
    heteroscedastic: bool = False
    alpha0: float = 0.5
    rho: float = 0.5

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if not 0 <= self.k0 <= self.p:
            raise ValueError("k0 must lie in 0..p")
        if not 0 < self.target_r2 < 1:
            raise ValueError("target_r2 must lie in (0, 1)")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")


@dataclass(frozen=True)
class MissSpec:
    mechanism: str = "MCAR"
    rate: float = 0.2
    slope: float = 1.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if not 0 < self.rate < 1:
            raise ValueError("rate must lie in (0, 1)")


@dataclass(frozen=True)
class TruthRecord:
    relevant_set: frozenset
    alpha0: float
    kappa: float


def toeplitz_cov(p: int, rho: float) -> np.ndarray:
    return scipy.linalg.toeplitz(rho ** np.arange(p))


def base_coefficients(p: int, k0: int) -> np.ndarray:
    j = np.arange(1, p + 1, dtype=float)
    return np.where(j <= k0, j**-2.0, 0.0)


def calibrate_kappa(spec: DgpSpec) -> float:
    """Scale of the coefficients giving the auxiliary equation ``D = X'g + v``
    (Var v = 1) a population R^2 of ``spec.target_r2``."""
    if not 0 < spec.target_r2 < 1:
        raise ValueError("target_r2 must lie in (0, 1)")
    b = base_coefficients(spec.p, spec.k0)
    c = float(b @ toeplitz_cov(spec.p, spec.rho) @ b)
    if c == 0:
        return 0.0
    r2 = spec.target_r2
    return math.sqrt(r2 / ((1.0 - r2) * c))


def gen_design1(spec: DgpSpec, rng=None, kappa: float | None = None) -> tuple[IncompleteDataset, TruthRecord]:
    """Draw a complete sample from the partially linear design."""
    rng = np.random.default_rng(rng)
    kappa = calibrate_kappa(spec) if kappa is None else kappa
    coef = kappa * base_coefficients(spec.p, spec.k0)
    chol = np.linalg.cholesky(toeplitz_cov(spec.p, spec.rho))
    x = rng.standard_normal((spec.n, spec.p)) @ chol.T
    d = x @ coef + rng.standard_normal(spec.n)
    xb = x @ coef
    e = rng.standard_normal(spec.n)
    if spec.heteroscedastic:
        scale = 1.0 + np.abs(xb)
        e = e * scale / math.sqrt(np.mean(scale**2))
    y = spec.alpha0 * d + xb + e
    ds = IncompleteDataset.from_arrays(y, d, x)
    return ds, TruthRecord(frozenset(range(spec.k0)), spec.alpha0, kappa)


def _solve_intercept(driver: np.ndarray, slope: float, rate: float) -> float:
    def gap(a):
        return float(np.mean(expit(a + slope * driver))) - rate

    lo, hi = -10.0, 10.0
    for _ in range(20):
        if gap(lo) < 0 < gap(hi):
            break
        lo, hi = 2 * lo, 2 * hi
    else:
        raise CalibrationError("could not bracket the missingness intercept")
    try:
        return bisect(gap, lo, hi, xtol=1e-10)
    except (ValueError, RuntimeError) as exc:
        raise CalibrationError(f"missingness calibration failed: {exc}") from exc


def apply_missingness(complete: IncompleteDataset, spec: MissSpec, rng=None) -> IncompleteDataset:
    """Mask X cells; Y and D stay observed.

    MCAR masks each cell with probability ``rate``. MAR uses
    ``logistic(a + slope * D_i)`` and MNAR ``logistic(a + slope * x_ij)``,
    with ``a`` found by bisection so the mean masking probability over the
    sample equals ``rate``.
    """
    rng = np.random.default_rng(rng)
    x = complete.x
    n, p = x.shape
    if spec.mechanism == "MCAR":
        prob = np.full((n, p), spec.rate)
    elif spec.mechanism == "MAR":
        a = _solve_intercept(complete.d, spec.slope, spec.rate)
        prob = np.repeat(expit(a + spec.slope * complete.d)[:, None], p, axis=1)
    else:
        a = _solve_intercept(x.ravel(), spec.slope, spec.rate)
        prob = expit(a + spec.slope * x)
    miss = rng.random((n, p)) < prob
    mask = complete.mask.copy()
    mask[:, list(complete.x_index)] &= ~miss
    return IncompleteDataset(complete.values, mask, complete.roles, complete.column_names)


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class MethodMetrics:
    tpr: float
    fpr: float
    dist_ideal: float
    model_size: float
    bias: float
    rmse: float
    coverage: float
    iter_mean: float
    iter_sd: float


@dataclass
class ScenarioResult:
    dgp: DgpSpec
    miss: MissSpec
    metrics: dict[str, MethodMetrics]
    replications: int
    failures: int
    records: list[dict] = field(default_factory=list, repr=False)


def selection_metrics(selected, truth, p: int) -> tuple[float, float, float, int]:
    """(TPR, FPR, distance to the ideal point (FPR, TPR) = (0, 1), model size)."""
    selected = set(selected)
    truth = set(truth)
    k0 = len(truth)
    tpr = len(selected & truth) / k0 if k0 else 1.0
    fpr = len(selected - truth) / (p - k0) if p > k0 else 0.0
    return tpr, fpr, math.hypot(fpr, 1.0 - tpr), len(selected)


def run_replication(dgp: DgpSpec, miss: MissSpec, run: RunConfig, root: np.random.SeedSequence, index: int) -> dict:
    """One replication; every method sees the same data and perturbation stream."""
    data, truth = gen_design1(dgp, child_rng(root, index, 0))
    inc = apply_missingness(data, miss, child_rng(root, index, 1))
    res = run_sequential(inc, run, child(root, index, 2), full_budget=True)
    stop = res.stop_iteration
    sets = {"proposed": res.selected}
    sets.update(fixed_budget_sets(res.union_history, run.t_max))
    sets.update({f"{k}_matched": v for k, v in matched_budget_sets(res.union_history, stop).items()})
    iterations = {m: (stop if m == "proposed" or m.endswith("_matched") else run.t_max) for m in METHODS}
    pooled = final_estimates(inc, sets, run.m_imputations, run.level, child(root, index, 3), run.impute_sweeps)
    rec = {"index": index, "stop_iteration": stop, "stop_reason": res.stop_reason, "calibration": res.calibration}
    for m in METHODS:
        tpr, fpr, dist, size = selection_metrics(sets[m], truth.relevant_set, dgp.p)
        est = pooled[m]
        rec[m] = {
            "selected": tuple(sorted(sets[m])),
            "tpr": tpr,
            "fpr": fpr,
            "dist_ideal": dist,
            "model_size": size,
            "estimate": est.q_bar,
            "ci_low": est.ci_low,
            "ci_high": est.ci_high,
            "covered": est.ci_low <= truth.alpha0 <= est.ci_high,
            "iterations": iterations[m],
        }
    return rec


def _replication_job(args):
    dgp, miss, run, entropy, spawn_key, index = args
    root = np.random.SeedSequence(entropy, spawn_key=spawn_key)
    try:
        return run_replication(dgp, miss, run, root, index)
    except Exception as exc:  # noqa: BLE001 - counted and reported per replication
        log.warning("replication %d failed: %s", index, exc)
        return {"index": index, "error": f"{type(exc).__name__}: {exc}"}


def aggregate(records: list[dict], alpha0: float) -> dict[str, MethodMetrics]:
    """Plain means over successful replications."""
    out = {}
    for m in METHODS:
        rows = [r[m] for r in records]
        est = np.array([r["estimate"] for r in rows])
        its = np.array([r["iterations"] for r in rows], dtype=float)
        err = est - alpha0
        out[m] = MethodMetrics(
            tpr=float(np.mean([r["tpr"] for r in rows])),
            fpr=float(np.mean([r["fpr"] for r in rows])),
            dist_ideal=float(np.mean([r["dist_ideal"] for r in rows])),
            model_size=float(np.mean([r["model_size"] for r in rows])),
            bias=float(np.mean(err)),
            rmse=float(np.sqrt(np.mean(err**2))),
            coverage=float(np.mean([r["covered"] for r in rows])),
            iter_mean=float(its.mean()),
            iter_sd=float(its.std(ddof=1)) if len(its) > 1 else 0.0,
        )
    return out


def run_scenario(dgp: DgpSpec, miss: MissSpec, run: RunConfig | None = None, replications: int = 100, rng=None, jobs: int = 1) -> ScenarioResult:
    """Replicate the full pipeline and aggregate selection, estimation and
    iteration metrics per method.

    Replication ``r`` is seeded from (master seed, r) only, so results do not
    depend on ``jobs``. Failed replications are skipped and counted; more
    than 10% failures abort the scenario.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    run = run or RunConfig()
    root = as_seed_sequence(run.seed if rng is None else rng)
    args = [(dgp, miss, run, root.entropy, tuple(root.spawn_key), r) for r in range(replications)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replication_job, args))
    else:
        results = [_replication_job(a) for a in args]
    results.sort(key=lambda r: r["index"])
    ok = [r for r in results if "error" not in r]
    failures = len(results) - len(ok)
    if failures > 0.1 * replications or not ok:
        errors = "; ".join([r["error"] for r in results if "error" in r][:3])
        raise ScenarioAbortError(f"{failures} of {replications} replications failed ({errors})")
    return ScenarioResult(dgp, miss, aggregate(ok, dgp.alpha0), replications, failures, ok)
