"""Post-double-selection candidate sets and the asymmetric detection rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import CompletedDataset
from .regress import InsufficientObservationsError, lasso_fit, ols_fit_dropping, select_lambda_cv


@dataclass(frozen=True)
class LambdaRule:
    """How the two LASSO penalties are chosen.

    kind is "cv_1se", "cv_min" or "fixed"; ``value`` is used only for
    "fixed" and applies to both equations.
    """

    kind: str = "cv_1se"
    folds: int = 5
    grid_size: int = 50
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("cv_1se", "cv_min", "fixed"):
            raise ValueError(f"unknown lambda rule {self.kind!r}")
        if self.kind == "fixed" and not (self.value is not None and self.value > 0):
            raise ValueError("fixed lambda rule needs a positive value")

    def choose(self, design, response, rng, penalize=None, groups=None) -> float:
        if self.kind == "fixed":
            return float(self.value)
        rule = "1se" if self.kind == "cv_1se" else "min"
        return select_lambda_cv(design, response, self.folds, self.grid_size, rng, penalize, rule, groups)


@dataclass(frozen=True)
class PdsSelection:
    s_y: frozenset
    s_d: frozenset
    lambda_y: float = float("nan")
    lambda_d: float = float("nan")

    @property
    def s_union(self) -> frozenset:
        return self.s_y | self.s_d


@dataclass(frozen=True)
class DetectionRow:
    z: np.ndarray
    iteration: int
    flags: tuple[str, ...] = ()

    @property
    def detected(self) -> frozenset:
        return frozenset(int(j) for j in np.flatnonzero(self.z))


@dataclass
class DetectionHistory:
    """Ordered detection rows; ``rows[i].iteration == i + 1``."""

    p: int
    rows: list[DetectionRow] = field(default_factory=list)

    def append(self, row: DetectionRow) -> None:
        if row.z.shape != (self.p,):
            raise ValueError("detection row has the wrong length")
        if row.iteration != len(self.rows) + 1:
            raise ValueError(f"expected iteration {len(self.rows) + 1}, got {row.iteration}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def matrix(self) -> np.ndarray:
        """T x p boolean matrix of detections."""
        if not self.rows:
            return np.zeros((0, self.p), dtype=bool)
        return np.vstack([r.z for r in self.rows])

    @classmethod
    def from_matrix(cls, z) -> DetectionHistory:
        z = np.asarray(z, dtype=bool)
        h = cls(z.shape[1])
        for t, row in enumerate(z, start=1):
            h.append(DetectionRow(row.copy(), t))
        return h


def pds_candidate(completed: CompletedDataset, lambda_rule: LambdaRule | None = None, rng=None) -> PdsSelection:
    """LASSO of Y on (D, X) with D unpenalized, and of D on X.

    Returns the active X indices (0-based) of each equation. CV folds are
    grouped by source row so bootstrap duplicates never straddle a split.
    """
    lambda_rule = lambda_rule or LambdaRule()
    rng = np.random.default_rng(rng)
    x, y, d = completed.x, completed.y, completed.d
    p = x.shape[1]

    design_y = np.column_stack([d, x])
    pen_y = np.r_[0.0, np.ones(p)]
    lam_y = lambda_rule.choose(design_y, y, rng, pen_y, completed.row_ids)
    fit_y = lasso_fit(design_y, y, lam_y, pen_y)
    s_y = frozenset(k - 1 for k in fit_y.active_set if k > 0)

    lam_d = lambda_rule.choose(x, d, rng, groups=completed.row_ids)
    fit_d = lasso_fit(x, d, lam_d)
    s_d = frozenset(fit_d.active_set)
    return PdsSelection(s_y, s_d, lam_y, lam_d)


def detect(completed: CompletedDataset, selection: PdsSelection, alpha: float = 0.05, iteration: int = 1) -> DetectionRow:
    """Asymmetric detection: j is detected if the D-equation selected it, or
    if only the Y-equation selected it and its coefficient in
    ``Y ~ 1 + D + X[s_union]`` has p-value below ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    p = completed.p
    z = np.zeros(p, dtype=bool)
    flags: list[str] = []
    for j in selection.s_d:
        z[j] = True
    y_only = selection.s_y - selection.s_d
    if y_only:
        union = sorted(selection.s_union)
        if completed.n <= len(union) + 2:
            flags.append("confirmation_skipped")
        else:
            design = np.column_stack([completed.d, completed.x[:, union]])
            try:
                fit, kept = ols_fit_dropping(design, completed.y)
            except InsufficientObservationsError:
                fit, kept = None, []
                flags.append("confirmation_skipped")
            if fit is not None:
                if len(kept) < design.shape[1]:
                    flags.append("collinear_dropped")
                # fit index 0 is the intercept, design column 0 is D
                pvals = {union[c - 1]: fit.p_values[i + 1] for i, c in enumerate(kept) if c > 0}
                for j in y_only:
                    if j in pvals and pvals[j] < alpha:
                        z[j] = True
    return DetectionRow(z, iteration, tuple(flags))
