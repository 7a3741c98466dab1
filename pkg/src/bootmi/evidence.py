"""Sequential log-evidence aggregation of detection indicators.

Each perturbation iteration yields a detection indicator per candidate
control. Under a Bernoulli working model with detection probabilities
``pi0`` (irrelevant) and ``pi1`` (relevant), every detection adds
``log(pi1/pi0)`` to a variable's log-evidence and every non-detection adds
``log((1-pi1)/(1-pi0))``. Variables are classified once their evidence
leaves ``(-c, c)`` and the run stops when nothing is left undecided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmarks import UnionHistory, frequency_threshold
from .config import RunConfig
from .dataset import IncompleteDataset
from .detect import DetectionHistory, DetectionRow, PdsSelection, detect, pds_candidate
from .perturb import PerturbationConfig, bootstrap_rows, impute_once
from .seeding import as_seed_sequence, child_rng

UNDECIDED, RELEVANT, IRRELEVANT = 0, 1, -1
STATUS_NAMES = {UNDECIDED: "undecided", RELEVANT: "relevant", IRRELEVANT: "irrelevant"}
PI1_CAP = 1.0 - 1e-4
BISECTION_TOL = 1e-6


class EvidenceDomainError(ValueError):
    pass


class SequencingError(ValueError):
    pass


def _check_pair(pi0: float, pi1: float) -> None:
    if not 0.0 < pi0 < pi1 < 1.0:
        raise EvidenceDomainError(f"need 0 < pi0 < pi1 < 1, got pi0={pi0}, pi1={pi1}")


def log_increments(pi0: float, pi1: float) -> tuple[float, float]:
    """(detection increment, non-detection increment)."""
    _check_pair(pi0, pi1)
    return math.log(pi1 / pi0), math.log((1.0 - pi1) / (1.0 - pi0))


def break_even(pi0: float, pi1: float) -> float:
    """Detection rate at which the expected log-evidence increment is zero."""
    _check_pair(pi0, pi1)
    num = math.log((1.0 - pi0) / (1.0 - pi1))
    return num / (math.log(pi1 / pi0) + num)


def drift(q: float, pi0: float, pi1: float) -> float:
    """Expected log-evidence increment for a variable detected with probability q."""
    if not 0.0 <= q <= 1.0:
        raise EvidenceDomainError("q must lie in [0, 1]")
    up, down = log_increments(pi0, pi1)
    return q * up + (1.0 - q) * down


def bernoulli_kl(a: float, b: float) -> float:
    """KL(Bernoulli(a) || Bernoulli(b))."""
    out = 0.0
    if a > 0:
        out += a * math.log(a / b)
    if a < 1:
        out += (1 - a) * math.log((1 - a) / (1 - b))
    return out


def decision_threshold(loss_fi: float, loss_fe: float, prior_h0: float = 0.5, prior_h1: float = 0.5) -> float:
    """Log-evidence cutoff above which including the variable is the Bayes action.

    ``loss_fi`` is the loss of a false inclusion, ``loss_fe`` of a false
    exclusion.
    """
    if loss_fi <= 0 or loss_fe <= 0:
        raise EvidenceDomainError("losses must be positive")
    if prior_h0 <= 0 or prior_h1 <= 0 or not math.isclose(prior_h0 + prior_h1, 1.0, abs_tol=1e-12):
        raise EvidenceDomainError("priors must be positive and sum to one")
    return math.log((loss_fi * prior_h0) / (loss_fe * prior_h1))


def expected_stopping_time(c: float, mu: float) -> float:
    """First-order approximation c/|mu| to the mean first exit time from (-c, c)."""
    if c <= 0:
        raise EvidenceDomainError("c must be positive")
    if mu == 0:
        raise EvidenceDomainError("stopping time is undefined without drift")
    return c / abs(mu)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Calibration:
    pi0_raw: float
    pi0: float
    pi1: float
    q_star: float
    lambda0: float
    pi0_min: float
    qstar_min: float
    fallback_triggered: bool
    pi0_stabilized: float = float("nan")
    qstar_floor_applied: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def pilot_frequencies(history: DetectionHistory) -> np.ndarray:
    if len(history) < 1:
        raise ValueError("pilot history is empty")
    return history.matrix().mean(axis=0)


def calibrate_rates(rates, alpha=0.05, lambda0=0.25, pi0_min=0.01, qstar_min=0.5) -> Calibration:
    """Working probabilities from pilot detection rates.

    pi0_raw is the mean rate among variables at or below the 10th
    percentile; pi1 is the mean among variables strictly above the median.
    pi0 is shrunk toward ``alpha``, floored at ``pi0_min``, and then raised
    by the smallest amount (bisection) that gives a break-even rate of at
    least ``qstar_min``.
    """
    rates = np.asarray(rates, dtype=float)
    q10 = np.quantile(rates, 0.10)
    med = np.median(rates)
    low = rates[rates <= q10]
    high = rates[rates > med]
    pi0_raw = float(low.mean())
    pi1 = float(high.mean()) if high.size else float("nan")
    pi1 = min(pi1, PI1_CAP)
    pi0 = max(pi0_min, (1.0 - lambda0) * pi0_raw + lambda0 * alpha)
    base = dict(pi0_raw=pi0_raw, pi1=pi1, lambda0=lambda0, pi0_min=pi0_min, qstar_min=qstar_min, pi0_stabilized=pi0)

    if not (pi1 > pi0):
        return Calibration(pi0=pi0, q_star=float("nan"), fallback_triggered=True, **base)
    q = break_even(pi0, pi1)
    if q >= qstar_min:
        return Calibration(pi0=pi0, q_star=q, fallback_triggered=False, **base)

    # break_even increases in pi0 and tends to pi1 as pi0 -> pi1
    hi = pi1 - 1e-12
    if break_even(hi, pi1) < qstar_min:
        return Calibration(pi0=pi0, q_star=q, fallback_triggered=True, qstar_floor_applied=True, **base)
    lo = pi0
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if break_even(mid, pi1) >= qstar_min:
            hi = mid
        else:
            lo = mid
    return Calibration(pi0=hi, q_star=break_even(hi, pi1), fallback_triggered=False, qstar_floor_applied=True, **base)


def calibrate(history: DetectionHistory, alpha=0.05, lambda0=0.25, pi0_min=0.01, qstar_min=0.5) -> Calibration:
    return calibrate_rates(pilot_frequencies(history), alpha, lambda0, pi0_min, qstar_min)


# --------------------------------------------------------------------------
# evidence state machine


@dataclass(frozen=True)
class EvidenceState:
    log_e: np.ndarray
    status: np.ndarray
    decided_at: np.ndarray
    detections: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, p: int) -> EvidenceState:
        return cls(np.zeros(p), np.zeros(p, dtype=np.int8), np.zeros(p, dtype=np.int64), np.zeros(p, dtype=np.int64), 0)

    @property
    def undecided(self) -> np.ndarray:
        return self.status == UNDECIDED

    @property
    def all_decided(self) -> bool:
        return not self.undecided.any()


def evidence_update(state: EvidenceState, row: DetectionRow, cal: Calibration) -> EvidenceState:
    """Add one iteration's log-likelihood ratios to every undecided variable."""
    if cal.fallback_triggered:
        raise EvidenceDomainError("calibration fell back; evidence accumulation is not defined")
    if row.iteration != state.t + 1:
        raise SequencingError(f"expected iteration {state.t + 1}, got {row.iteration}")
    up, down = log_increments(cal.pi0, cal.pi1)
    z = np.asarray(row.z, dtype=bool)
    open_ = state.undecided
    log_e = state.log_e.copy()
    log_e[open_] += np.where(z[open_], up, down)
    detections = state.detections + (z & open_)
    return replace(state, log_e=log_e, detections=detections, t=state.t + 1)


def classify(state: EvidenceState, c: float, t_min: int = 1) -> EvidenceState:
    """Absorbing classification at log-evidence >= c (relevant) or <= -c (irrelevant)."""
    if not c > 0:
        raise EvidenceDomainError("c must be positive")
    if state.t < t_min:
        return state
    open_ = state.undecided
    up = open_ & (state.log_e >= c)
    down = open_ & (state.log_e <= -c)
    if not (up.any() or down.any()):
        return state
    status = state.status.copy()
    status[up] = RELEVANT
    status[down] = IRRELEVANT
    decided_at = state.decided_at.copy()
    decided_at[up | down] = state.t
    return replace(state, status=status, decided_at=decided_at)


# --------------------------------------------------------------------------
# orchestration


class CalibrationFallbackError(RuntimeError):
    """Pilot frequencies do not separate relevant from irrelevant variables.

    Carries the pilot histories so callers can fall back to frequency
    thresholding.
    """

    def __init__(self, calibration: Calibration, pilot_history: DetectionHistory, pilot_unions: UnionHistory):
        self.calibration = calibration
        self.pilot_history = pilot_history
        self.pilot_unions = pilot_unions
        super().__init__(
            f"pilot calibration failed to separate detection rates after {len(pilot_history)} iterations "
            f"(pi0={calibration.pi0:.4f}, pi1={calibration.pi1:.4f}); use frequency-threshold aggregation instead"
        )

    def frequency_sets(self, taus=(0.5, 0.75)) -> dict[str, frozenset]:
        T = len(self.pilot_unions)
        return {f"freq{round(t * 100)}": frequency_threshold(self.pilot_unions, t, T) for t in taus}


@dataclass
class SequentialResult:
    selected: frozenset
    undecided: frozenset
    calibration: Calibration
    history: DetectionHistory
    pilot_history: DetectionHistory
    evidence_paths: np.ndarray
    status: np.ndarray
    decided_at: np.ndarray
    stop_iteration: int
    stop_reason: str
    union_history: UnionHistory
    pilot_unions: UnionHistory
    selections: list[PdsSelection] = field(default_factory=list)
    flags: dict[str, int] = field(default_factory=dict)


def perturbation_step(dataset, config: RunConfig, rng, iteration: int, pools=None) -> tuple[PdsSelection, DetectionRow]:
    """One bootstrap -> impute -> PDS -> detect pass."""
    boot = bootstrap_rows(dataset, rng)
    done = impute_once(boot, PerturbationConfig(config.impute_sweeps, iteration_index=iteration), rng=rng, pools=pools)
    sel = pds_candidate(done, config.lambda_rule, rng)
    row = detect(done, sel, config.alpha, iteration)
    if done.flags:
        row = replace(row, flags=row.flags + done.flags)
    return sel, row


PILOT, EVIDENCE = 0, 1


def run_sequential(dataset: IncompleteDataset, config: RunConfig | None = None, rng=None, *, full_budget: bool = False) -> SequentialResult:
    """Pilot calibration followed by sequential evidence accumulation.

    Every perturbation iteration draws its own stream from the master seed
    (``rng``, else ``config.seed``) keyed by phase and iteration number, so
    the run is a pure function of (dataset, config, seed). With
    ``full_budget=True`` perturbations continue after the stopping time, up
    to ``t_max``, to fill ``union_history`` for fixed-budget benchmarks;
    those extra iterations do not touch the evidence.
    """
    config = config or RunConfig()
    root = as_seed_sequence(config.seed if rng is None else rng)
    p = dataset.p
    pools = {j: dataset.values[dataset.mask[:, j], j] for j in dataset.x_index}
    flag_counts: dict[str, int] = {}

    def step(phase, t, iteration):
        sel, row = perturbation_step(dataset, config, child_rng(root, phase, t), iteration, pools)
        for f in row.flags:
            key = f.split(":")[0]
            flag_counts[key] = flag_counts.get(key, 0) + 1
        return sel, row

    pilot = DetectionHistory(p)
    pilot_unions = UnionHistory(p)

    def run_pilot(count):
        for _ in range(count):
            t = len(pilot) + 1
            sel, row = step(PILOT, t, t)
            pilot.append(row)
            pilot_unions.append(sel.s_union)

    run_pilot(config.t_pilot)
    cal = calibrate(pilot, config.alpha, config.lambda0, config.pi0_min, config.qstar_min)
    if cal.fallback_triggered:
        run_pilot(config.t_pilot)
        cal = calibrate(pilot, config.alpha, config.lambda0, config.pi0_min, config.qstar_min)
        if cal.fallback_triggered:
            raise CalibrationFallbackError(cal, pilot, pilot_unions)

    state = EvidenceState.fresh(p)
    history = DetectionHistory(p)
    unions = UnionHistory(p)
    selections: list[PdsSelection] = []
    paths = []
    stop_reason = "t_max"
    for t in range(1, config.t_max + 1):
        sel, row = step(EVIDENCE, t, t)
        history.append(row)
        unions.append(sel.s_union)
        selections.append(sel)
        state = classify(evidence_update(state, row, cal), config.c_log_threshold, config.t_min)
        paths.append(state.log_e)
        if state.all_decided:
            stop_reason = "all_classified"
            break
    stop = state.t

    if full_budget:
        for t in range(stop + 1, config.t_max + 1):
            sel, _ = step(EVIDENCE, t, t)
            unions.append(sel.s_union)
            selections.append(sel)

    status = state.status
    return SequentialResult(
        selected=frozenset(int(j) for j in np.flatnonzero(status == RELEVANT)),
        undecided=frozenset(int(j) for j in np.flatnonzero(status == UNDECIDED)),
        calibration=cal,
        history=history,
        pilot_history=pilot,
        evidence_paths=np.column_stack(paths) if paths else np.zeros((p, 0)),
        status=status,
        decided_at=state.decided_at,
        stop_iteration=stop,
        stop_reason=stop_reason,
        union_history=unions,
        pilot_unions=pilot_unions,
        selections=selections,
        flags=flag_counts,
    )
