"""Errors raised by the estimation pipeline.

Each error carries the process exit code the CLI reports for it.
"""

from typing import Any, Dict, List, Optional


class HybridControlError(Exception):
    exit_code = 1
    kind = "error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.kind, "message": self.message, "details": self.details}


class ConfigError(HybridControlError):
    kind = "config_error"


class DataValidationError(HybridControlError):
    """Dataset or CSV failed validation; `violations` lists every problem found."""

    kind = "validation_error"

    def __init__(self, message: str, violations: Optional[List[Any]] = None):
        self.violations = list(violations or [])
        super().__init__(message, {"violations": [_dump(v) for v in self.violations]})


class ConvergenceError(HybridControlError):
    exit_code = 2
    kind = "non_convergence"


class RankDeficientError(HybridControlError):
    exit_code = 2
    kind = "rank_deficient"


class ZeroDenominatorError(HybridControlError):
    exit_code = 2
    kind = "zero_denominator"


class EstimationError(HybridControlError):
    exit_code = 2
    kind = "estimation_error"


class SingularCovarianceError(HybridControlError):
    exit_code = 2
    kind = "singular_covariance"


class InfeasibleCalibrationError(HybridControlError):
    exit_code = 3
    kind = "infeasible_calibration"


def _dump(violation: Any) -> Any:
    if hasattr(violation, "model_dump"):
        return violation.model_dump()
    return violation
