from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from hybrid_control.core.config import Config


@dataclass(frozen=True, eq=False)
class BiasEstimates:
    """Initial per-EC bias estimates mu0_ec(X_i) - mu0(X_i)."""
    b_hat: np.ndarray
    source: str = "linear"
    cross_fitted: bool = False


@dataclass(frozen=True, eq=False)
class PseudoObservations:
    xi_hat: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        if self.xi_hat.shape != self.sigma2.shape:
            raise ValueError("pseudo-observations and variances differ in length")


@dataclass(frozen=True, eq=False)
class BiasSelection:
    """Adaptive-lasso solution; `selected` holds the exact-zero coordinates of b_tilde."""
    b_tilde: np.ndarray
    selected: Tuple[int, ...]
    lam: float
    omega: float
    cv_path: List[Dict[str, float]] = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        out = np.zeros(self.b_tilde.shape[0], dtype=bool)
        out[list(self.selected)] = True
        return out

    @property
    def n_selected(self) -> int:
        return len(self.selected)

    def summary(self) -> Dict[str, object]:
        return {
            "lambda": self.lam,
            "omega": self.omega,
            "n_selected": self.n_selected,
            "n_ec": int(self.b_tilde.shape[0]),
            "cv_path": self.cv_path,
        }


class SelectionConfig(BaseModel):
    """Tuning grids for the adaptive lasso; an empty lambda_grid means a data-driven grid per omega."""
    lambda_grid: List[float] = []
    grid_size: int = Config.LAMBDA_GRID_SIZE
    min_ratio: float = Config.LAMBDA_MIN_RATIO
    omega_grid: List[float] = list(Config.OMEGA_GRID)
    folds: int = Config.CV_FOLDS
    seed: int = 0

    @field_validator("lambda_grid")
    def validate_lambda_grid(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("lambda values must be nonnegative")
        return sorted(v)

    @field_validator("omega_grid")
    def validate_omega_grid(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("omega grid must be nonempty with positive values")
        return v

    @model_validator(mode="after")
    def validate_sizes(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be at least 1")
        if not 0 < self.min_ratio <= 1:
            raise ValueError("min_ratio must lie in (0, 1]")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        return self

    def fixed_grid(self) -> Optional[List[float]]:
        return self.lambda_grid or None
