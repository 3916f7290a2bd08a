from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator
from scipy.special import expit
from sklearn.preprocessing import PolynomialFeatures

from hybrid_control.core.config import Config


class BasisSpec(BaseModel):
    """Basis expansion applied to covariates before a linear fit or a calibration.

    identity: X; power: X, X^2, ..., X^degree (no cross terms);
    polynomial: all monomials up to degree; interaction: X plus pairwise products.
    """
    kind: Literal["identity", "power", "polynomial", "interaction"] = "identity"
    degree: int = 1

    @field_validator("degree")
    def validate_degree(cls, v):
        if v < 1:
            raise ValueError("degree must be at least 1")
        return v

    def expand(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if self.kind == "identity" or X.shape[1] == 0:
            return X
        if self.kind == "power":
            return np.hstack([X ** k for k in range(1, self.degree + 1)])
        if self.kind == "polynomial":
            return PolynomialFeatures(self.degree, include_bias=False).fit_transform(X)
        return PolynomialFeatures(2, interaction_only=True, include_bias=False).fit_transform(X)

    def dimension(self, n_covariates: int) -> int:
        return self.expand(np.zeros((1, n_covariates))).shape[1]


@dataclass(frozen=True, eq=False)
class LinearModel:
    basis: BasisSpec
    coefficients: np.ndarray  # intercept first
    fitted_on: str = ""
    ridge: bool = False

    @property
    def n_parameters(self) -> int:
        return int(self.coefficients.shape[0])

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = self.basis.expand(X)
        if Z.shape[1] + 1 != self.coefficients.shape[0]:
            raise ValueError(
                f"design has {Z.shape[1]} columns, model expects {self.coefficients.shape[0] - 1}"
            )
        return self.coefficients[0] + Z @ self.coefficients[1:]

    def summary(self) -> Dict[str, Any]:
        return {
            "type": "linear",
            "basis": self.basis.model_dump(),
            "coefficients": self.coefficients.tolist(),
            "fitted_on": self.fitted_on,
            "ridge": self.ridge,
        }


@dataclass(frozen=True, eq=False)
class LogisticModel:
    coefficients: np.ndarray  # intercept first, log-odds scale
    iterations: int
    gradient_norm: float
    status: Literal["converged", "separation"] = "converged"
    fitted_on: str = ""

    @property
    def separation(self) -> bool:
        return self.status == "separation"

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[1] + 1 != self.coefficients.shape[0]:
            raise ValueError(
                f"design has {X.shape[1]} columns, model expects {self.coefficients.shape[0] - 1}"
            )
        p = expit(self.coefficients[0] + X @ self.coefficients[1:])
        return np.clip(p, 1e-15, 1.0 - 1e-15)

    def summary(self) -> Dict[str, Any]:
        return {
            "type": "logistic",
            "coefficients": self.coefficients.tolist(),
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "status": self.status,
            "fitted_on": self.fitted_on,
        }


@dataclass(frozen=True, eq=False)
class BoostedTreesModel:
    """Squared-error gradient boosting with out-of-fold models for cross-fitting.

    `estimator` is the full-data fit (None when there are no trees, in which
    case every prediction is `intercept`); `fold_models[k]` was trained on all
    rows whose fold id differs from k.
    """
    estimator: Any
    intercept: float
    shrinkage: float
    n_trees: int
    max_depth: int
    fold_assignment: np.ndarray
    fold_models: Tuple[Any, ...] = ()
    cv_scores: Dict[str, float] = field(default_factory=dict)

    @property
    def trees(self) -> List[Any]:
        if self.estimator is None:
            return []
        return [stage[0] for stage in self.estimator.estimators_]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.estimator is None:
            return np.full(X.shape[0], self.intercept)
        return self.estimator.predict(X)

    def predict_cross_fitted(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.fold_assignment.shape[0]:
            raise ValueError("cross-fitted prediction needs the training rows the folds were assigned to")
        if self.estimator is None:
            return np.full(X.shape[0], self.intercept)
        out = np.empty(X.shape[0])
        for k, model in enumerate(self.fold_models):
            rows = self.fold_assignment == k
            if rows.any():
                out[rows] = model.predict(X[rows])
        return out

    def summary(self) -> Dict[str, Any]:
        return {
            "type": "boosted_trees",
            "intercept": self.intercept,
            "shrinkage": self.shrinkage,
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "folds": int(self.fold_assignment.max()) + 1 if self.fold_assignment.size else 0,
            "cv_scores": self.cv_scores,
        }


@dataclass(frozen=True)
class VarianceRatio:
    value: float
    numerator: float
    denominator: float


class BoostingConfig(BaseModel):
    n_trees: List[int] = list(Config.BOOSTING_TREES)
    depths: List[int] = list(Config.BOOSTING_DEPTHS)
    shrinkage: float = Config.BOOSTING_SHRINKAGE
    folds: int = Config.CROSS_FIT_FOLDS
    seed: int = 0

    @field_validator("n_trees", "depths")
    def validate_grid(cls, v):
        if not v or any(x < 0 for x in v):
            raise ValueError("grid must be a nonempty list of nonnegative integers")
        return sorted(set(v))

    @field_validator("folds")
    def validate_folds(cls, v):
        if v < 2:
            raise ValueError("cross-fitting needs at least 2 folds")
        return v
