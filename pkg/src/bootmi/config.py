"""Run configuration shared by the sequential procedure, the simulator and the CLI."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

from .detect import LambdaRule

LOG_THRESHOLDS = {
    "log3": math.log(3.0),
    "log10": math.log(10.0),
    "log30": math.log(30.0),
    "log1000": math.log(1000.0),
}


def parse_threshold(value) -> float:
    """Accept a number or one of the symbolic names in ``LOG_THRESHOLDS``."""
    if isinstance(value, str):
        key = value.strip().lower()
        if key in LOG_THRESHOLDS:
            return LOG_THRESHOLDS[key]
        try:
            return float(key)
        except ValueError:
            raise ValueError(f"threshold must be a number or one of {sorted(LOG_THRESHOLDS)}") from None
    return float(value)


@dataclass(frozen=True)
class RunConfig:
    t_pilot: int = 20
    t_max: int = 200
    t_min: int = 5
    c_log_threshold: float = math.log(10.0)
    alpha: float = 0.05
    lambda0: float = 0.25
    pi0_min: float = 0.01
    qstar_min: float = 0.5
    m_imputations: int = 10
    seed: int = 0
    lambda_rule: LambdaRule = field(default_factory=LambdaRule)
    impute_sweeps: int = 5
    level: float = 0.95

    def __post_init__(self):
        if self.t_pilot < 2:
            raise ValueError("t_pilot must be >= 2")
        if self.t_max < self.t_pilot:
            raise ValueError("t_max must be >= t_pilot")
        if self.t_min < 1:
            raise ValueError("t_min must be >= 1")
        if not self.c_log_threshold > 0:
            raise ValueError("c_log_threshold must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 <= self.lambda0 <= 1:
            raise ValueError("lambda0 must lie in [0, 1]")
        if not 0 < self.pi0_min < 1:
            raise ValueError("pi0_min must lie in (0, 1)")
        if not 0 < self.qstar_min < 1:
            raise ValueError("qstar_min must lie in (0, 1)")
        if self.m_imputations < 2:
            raise ValueError("m_imputations must be >= 2")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if "c_log_threshold" in data:
            data["c_log_threshold"] = parse_threshold(data["c_log_threshold"])
        if isinstance(data.get("lambda_rule"), dict):
            data["lambda_rule"] = LambdaRule(**data["lambda_rule"])
        elif isinstance(data.get("lambda_rule"), str):
            data["lambda_rule"] = LambdaRule(kind=data["lambda_rule"])
        return cls(**data)
