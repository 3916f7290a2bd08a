from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


@dataclass(frozen=True, eq=False)
class EifInputs:
    """Per-record ingredients of the efficient influence function.

    `q` is the density-ratio-scale calibration weight at every record
    (RPCT and EC). `selected`, `pi_b` and `r_b` only matter for the
    selective-borrowing estimator; they default to "borrow every EC".
    """
    in_rpct: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    propensity: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    q: np.ndarray
    r: float = 0.0
    selected: Optional[np.ndarray] = None
    pi_b: Optional[np.ndarray] = None
    r_b: Optional[float] = None

    def __post_init__(self):
        n = np.asarray(self.in_rpct).shape[0]
        object.__setattr__(self, "in_rpct", np.asarray(self.in_rpct, dtype=bool))
        for name in ("treatment", "outcome", "propensity", "mu1", "mu0", "q"):
            value = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,))
            object.__setattr__(self, name, value)
        if self.selected is None:
            object.__setattr__(self, "selected", ~self.in_rpct)
        else:
            object.__setattr__(self, "selected", np.asarray(self.selected, dtype=bool) & ~self.in_rpct)
        pi_b = np.ones(n) if self.pi_b is None else np.broadcast_to(np.asarray(self.pi_b, dtype=float), (n,))
        object.__setattr__(self, "pi_b", pi_b)
        if self.r_b is None:
            object.__setattr__(self, "r_b", self.r)

        rpct = self.in_rpct
        if rpct.sum() < 1:
            raise ValueError("influence inputs need at least one RPCT record")
        if np.any((self.propensity[rpct] <= 0) | (self.propensity[rpct] >= 1)):
            raise ValueError("treatment propensity must lie in (0, 1) on RPCT records")
        if np.any(self.q[~rpct] <= 0):
            raise ValueError("calibration weights must be positive on EC records")
        if self.r < 0 or self.r_b < 0:
            raise ValueError("variance ratios must be nonnegative")
        if np.any((pi_b < 0) | (pi_b > 1)):
            raise ValueError("selection probabilities must lie in [0, 1]")

    @property
    def n(self) -> int:
        return int(self.in_rpct.shape[0])

    @property
    def n_rpct(self) -> int:
        return int(self.in_rpct.sum())

    @property
    def eps1(self) -> np.ndarray:
        return self.outcome - self.mu1

    @property
    def eps0(self) -> np.ndarray:
        return self.outcome - self.mu0


class EstimateReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    estimator: str
    tau_hat: float
    variance: float
    std_error: float
    ci_low: float
    ci_high: float
    alpha: float
    n_borrowed: int = 0
    efficiency_gain: Optional[float] = None
    diagnostics: Dict[str, Any] = {}
    influence_values: Optional[np.ndarray] = Field(default=None, exclude=True, repr=False)

    @model_validator(mode="after")
    def validate_interval(self):
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")
        if not self.ci_low <= self.tau_hat <= self.ci_high:
            raise ValueError("confidence interval must contain the point estimate")
        return self


class HypothesisDecision(BaseModel):
    estimator: str
    null_value: float
    side: Literal["two-sided", "less", "greater"]
    alpha: float
    statistic: float
    p_value: float
    reject: bool


class PooledEstimate(BaseModel):
    estimator: str
    groups: List[int]
    per_group: List[EstimateReport]
    covariance: List[List[float]]
    weights: List[float]
    tau_star: float
    variance_star: float
    std_error: float
    ci_low: float
    ci_high: float
    n: int
    regularized: bool = False
    negative_weights: bool = False


@dataclass
class PipelineResult:
    """Everything one pass of the estimation pipeline produces for a single EC group."""
    reports: Dict[str, EstimateReport]
    record_mask: np.ndarray
    selections: Dict[str, Dict[str, Any]]
    selection_frames: List[Any]
    weights_frames: List[Any]
    calibration: Dict[str, Any]
    models: Dict[str, Dict[str, Any]]
    group: Optional[int] = None
