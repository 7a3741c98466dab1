"""Bootstrap resampling and chained stochastic regression imputation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .dataset import CompletedDataset, IncompleteDataset
from .seeding import as_seed_sequence, child_rng


class ImputationError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationConfig:
    impute_sweeps: int = 5
    seed: int = 0
    iteration_index: int = 0

    def __post_init__(self):
        if self.impute_sweeps < 1:
            raise ValueError("impute_sweeps must be >= 1")

    def rng(self) -> np.random.Generator:
        return child_rng(as_seed_sequence(self.seed), self.iteration_index)


def bootstrap_rows(dataset: IncompleteDataset, rng) -> IncompleteDataset:
    """n rows drawn uniformly with replacement; masks travel with their rows."""
    if dataset.n < 2:
        raise ValueError("bootstrap needs n >= 2")
    rng = np.random.default_rng(rng)
    return dataset.take_rows(rng.integers(0, dataset.n, dataset.n))


@njit(cache=True)
def _cholesky(m, out):
    """Lower Cholesky factor into ``out``; False if ``m`` is not positive definite."""
    k = m.shape[0]
    for i in range(k):
        for j in range(i + 1):
            s = m[i, j]
            for l in range(j):
                s -= out[i, l] * out[j, l]
            if i == j:
                if s <= 0.0:
                    return False
                out[i, i] = np.sqrt(s)
            else:
                out[i, j] = s / out[j, j]
        for j in range(i + 1, k):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_jitter(m, out):
    if _cholesky(m, out):
        return True
    k = m.shape[0]
    tr = 0.0
    for i in range(k):
        tr += m[i, i]
    jitter = 1e-8 * max(tr / k, 1.0)
    work = m.copy()
    for _ in range(8):
        for i in range(k):
            work[i, i] = m[i, i] + jitter
        if _cholesky(work, out):
            return True
        jitter *= 100.0
    return False


@njit(cache=True)
def _restrict(go, jj, preds, n_obs, fixed):
    """Keep ``fixed`` predictors plus the columns most correlated with column
    ``jj`` so that there are at least three observed rows per predictor."""
    n_fixed = 0
    for f in fixed:
        if f != jj:
            n_fixed += 1
    budget = max(n_obs // 3 - 1, n_fixed)
    if preds.shape[0] - 1 <= budget:
        return preds
    others = np.empty(preds.shape[0], dtype=np.int64)
    n_oth = 0
    for q in range(1, preds.shape[0]):
        k = preds[q]
        is_fixed = False
        for f in fixed:
            if f == k:
                is_fixed = True
        if not is_fixed:
            others[n_oth] = k
            n_oth += 1
    others = others[:n_oth]
    mean = go[0] / n_obs
    score = np.empty(n_oth)
    for i in range(n_oth):
        k = others[i]
        var = go[k, k] / n_obs - mean[k] ** 2
        cov = go[jj, k] / n_obs - mean[k] * mean[jj]
        score[i] = -abs(cov) / np.sqrt(max(var, 1e-300))
    order = np.argsort(score, kind="mergesort")
    keep = np.zeros(go.shape[0], dtype=np.bool_)
    keep[0] = True
    for f in fixed:
        if f != jj:
            keep[f] = True
    for i in range(min(budget - n_fixed, n_oth)):
        keep[others[order[i]]] = True
    return np.flatnonzero(keep)


@njit(cache=True)
def _chain(a, g, mis_idx, mis_off, active_pos, fixed, sweeps, z):
    """Chained stochastic regression passes on the augmented matrix ``a``
    (column 0 is the intercept), maintaining ``g = a'a``. Returns -1 on
    success or the position of a column whose model matrix is singular.
    """
    n, k1 = a.shape
    n_act = active_pos.shape[0]
    zpos = 0
    chol = np.empty((k1, k1))
    for _ in range(sweeps):
        for c in range(n_act):
            jj = active_pos[c]
            rows = mis_idx[mis_off[c]:mis_off[c + 1]]
            nm = rows.shape[0]
            am = np.empty((nm, k1))
            for i in range(nm):
                am[i] = a[rows[i]]
            go = g - np.dot(am.T, am)
            n_obs = n - nm
            preds = np.empty(k1 - 1, dtype=np.int64)
            q = 0
            for u in range(k1):
                if u != jj:
                    preds[q] = u
                    q += 1
            if n_obs < 3 * preds.shape[0]:
                preds = _restrict(go, jj, preds, n_obs, fixed)
            kp = preds.shape[0]
            gpp = np.empty((kp, kp))
            gpj = np.empty(kp)
            for u in range(kp):
                gpj[u] = go[preds[u], jj]
                for v in range(kp):
                    gpp[u, v] = go[preds[u], preds[v]]
            low = chol[:kp, :kp]
            factored = True
            try:
                low[:, :] = np.linalg.cholesky(gpp)
            except Exception:  # noqa: BLE001 - numba only catches the base class
                factored = False
            if not factored and not _chol_jitter(gpp, low):
                return jj
            # beta = gpp^-1 gpj via two triangular solves
            w = np.empty(kp)
            for u in range(kp):
                s = gpj[u]
                for v in range(u):
                    s -= low[u, v] * w[v]
                w[u] = s / low[u, u]
            beta = np.empty(kp)
            for u in range(kp - 1, -1, -1):
                s = w[u]
                for v in range(u + 1, kp):
                    s -= low[v, u] * beta[v]
                beta[u] = s / low[u, u]
            rss = go[jj, jj]
            for u in range(kp):
                rss -= beta[u] * gpj[u]
            sigma = np.sqrt(max(rss, 0.0) / max(n_obs - kp, 1))
            # coefficient draw: beta + sigma * L^-T z
            dz = np.empty(kp)
            for u in range(kp - 1, -1, -1):
                s = z[zpos + u]
                for v in range(u + 1, kp):
                    s -= low[v, u] * dz[v]
                dz[u] = s / low[u, u]
            zpos += k1
            for u in range(kp):
                beta[u] += sigma * dz[u]
            for i in range(nm):
                r = rows[i]
                s = 0.0
                for u in range(kp):
                    s += a[r, preds[u]] * beta[u]
                a[r, jj] = s + sigma * z[zpos + i]
            zpos += nm
            col = np.dot(a.T, np.ascontiguousarray(a[:, jj]))
            for u in range(k1):
                g[u, jj] = col[u]
                g[jj, u] = col[u]
    return -1


def impute_once(dataset: IncompleteDataset, config: PerturbationConfig | None = None, rng=None, pools=None) -> CompletedDataset:
    """Complete ``dataset`` with one draw of chained stochastic linear imputation.

    Missing cells start as draws from their column's observed values. Each
    sweep then visits the incomplete columns in index order, regresses the
    column's observed entries on every other column (current completions)
    plus an intercept, draws coefficients from N(b, s^2 (A'A)^-1) and fills
    the missing entries with the prediction plus N(0, s^2) noise.

    ``pools`` optionally maps a column index to the values used when that
    column has fewer than two observed entries in ``dataset`` (e.g. after a
    bootstrap draw); otherwise the column's own observed values are used.
    """
    config = config or PerturbationConfig()
    rng = config.rng() if rng is None else np.random.default_rng(rng)
    mask = dataset.mask
    vals = dataset.values.copy()
    n = dataset.n
    miss_cols = [j for j in dataset.x_index if not mask[:, j].all()]
    if not miss_cols:
        return CompletedDataset(dataset.values, dataset.roles, dataset.column_names, str(config.iteration_index), row_ids=dataset.row_ids)

    flags: list[str] = []
    active = []
    for j in miss_cols:
        mis = ~mask[:, j]
        obs = vals[mask[:, j], j]
        name = dataset.column_names[j]
        if obs.size < 2:
            pool = obs if pools is None or j not in pools else np.asarray(pools[j], dtype=float)
            if pool.size == 0:
                raise ImputationError(f"column {name!r} has no observed values to draw from")
            vals[mis, j] = rng.choice(pool, mis.sum())
            flags.append(f"pool_fill:{name}")
        elif np.ptp(obs) == 0:
            vals[mis, j] = obs.mean()
            flags.append(f"mean_fill:{name}")
        else:
            vals[mis, j] = rng.choice(obs, mis.sum())
            active.append(j)

    if active:
        # regress on standardized columns; constant columns add nothing beyond the intercept
        mu = vals.mean(0)
        sd = vals.std(0)
        usable = [k for k in range(vals.shape[1]) if sd[k] > 0]
        pos = {k: i + 1 for i, k in enumerate(usable)}
        a = np.ones((n, len(usable) + 1))
        a[:, 1:] = (vals[:, usable] - mu[usable]) / sd[usable]
        g = a.T @ a
        fixed = np.array([pos[k] for k in (dataset.y_index, dataset.d_index) if k in pos], dtype=np.int64)
        rows = [np.flatnonzero(~mask[:, j]) for j in active]
        mis_off = np.zeros(len(active) + 1, dtype=np.int64)
        mis_off[1:] = np.cumsum([len(r) for r in rows])
        mis_idx = np.concatenate(rows).astype(np.int64)
        k1 = a.shape[1]
        z = rng.standard_normal(config.impute_sweeps * (len(active) * k1 + int(mis_off[-1])))
        bad = _chain(a, g, mis_idx, mis_off, np.array([pos[j] for j in active], dtype=np.int64), fixed, config.impute_sweeps, z)
        if bad >= 0:
            raise ImputationError(f"imputation model for column {dataset.column_names[usable[bad - 1]]!r} is not positive definite")
        vals[:, usable] = a[:, 1:] * sd[usable] + mu[usable]
    vals[mask] = dataset.values[mask]
    return CompletedDataset(vals, dataset.roles, dataset.column_names, str(config.iteration_index), tuple(flags), dataset.row_ids)


def impute_m(dataset: IncompleteDataset, m: int, rng=None, impute_sweeps: int = 5) -> list[CompletedDataset]:
    """``m`` independent completions, each on its own spawned sub-stream."""
    if m < 2:
        raise ValueError("m must be >= 2")
    root = as_seed_sequence(rng)
    return [
        impute_once(dataset, PerturbationConfig(impute_sweeps, iteration_index=i), rng=child_rng(root, i))
        for i in range(m)
    ]
