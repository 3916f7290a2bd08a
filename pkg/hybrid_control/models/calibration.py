from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from hybrid_control.models.nuisance import BasisSpec


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Entropy-balancing problem: reweight EC basis rows to hit the RPCT moments.

    g(x) = basis(standardize(x)) where standardize uses `center` and `scale`
    (pooled RPCT + EC mean and sd), so the basis can be evaluated at any record.
    """
    ec_basis: np.ndarray
    target_moments: np.ndarray
    basis_spec: BasisSpec
    center: np.ndarray
    scale: np.ndarray
    ec_record_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.ec_basis.ndim != 2 or self.ec_basis.shape[0] < 1 or self.ec_basis.shape[1] < 1:
            raise ValueError("calibration needs at least one EC record and one basis function")
        if self.target_moments.shape != (self.ec_basis.shape[1],):
            raise ValueError("target moments do not match the basis dimension")

    @property
    def n_ec(self) -> int:
        return int(self.ec_basis.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.ec_basis.shape[1])

    def basis_values(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return self.basis_spec.expand((X - self.center) / self.scale)


@dataclass(frozen=True, eq=False)
class CalibrationWeights:
    """Normalized EC weights q (sum to one) in exponential-family form.

    log q_i = dual . g(X_i) - log_normalizer, with g the problem's basis.
    """
    weights: np.ndarray
    dual: np.ndarray
    residual: float
    objective: float
    log_normalizer: float
    iterations: int = 0
    dual_residual: float = 0.0
    diagnostics: Dict[str, object] = field(default_factory=dict)

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))
