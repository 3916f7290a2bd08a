from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

from hybrid_control.core.config import Config
from hybrid_control.models.dataset import ColumnSchema
from hybrid_control.models.nuisance import BasisSpec, BoostingConfig
from hybrid_control.models.selection import SelectionConfig

EstimatorName = Literal["aipw", "acw", "acw_alasso", "acw_alasso_gbm"]
ALL_ESTIMATORS: List[str] = ["aipw", "acw", "acw_alasso", "acw_alasso_gbm"]


class RunConfig(BaseModel):
    """Resolved settings for `estimate` and `validate`.

    `columns` may be omitted, in which case every column other than
    source/treatment/outcome (and an optional propensity/record_id) is a
    covariate. `propensity` is the constant design probability pi_A.
    """
    command: Literal["estimate", "simulate", "validate"] = "estimate"
    input: Optional[str] = None
    out: str = "out"
    columns: Optional[ColumnSchema] = None
    propensity: Optional[float] = None
    positivity_eps: float = Config.POSITIVITY_EPS
    estimators: List[EstimatorName] = list(ALL_ESTIMATORS)
    outcome_basis: BasisSpec = Field(default_factory=BasisSpec)
    calibration_basis: BasisSpec = Field(default_factory=BasisSpec)
    calibration_tol: float = Config.CALIBRATION_TOL
    calibration_max_iter: int = Config.CALIBRATION_MAX_ITER
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    boosting: BoostingConfig = Field(default_factory=BoostingConfig)
    alpha: float = Config.ALPHA
    seed: int = 0
    threads: int = 1
    write_influence: bool = False

    @field_validator("alpha")
    def validate_alpha(cls, v):
        if not 0 < v < 1:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("propensity")
    def validate_propensity(cls, v):
        if v is not None and not 0 < v < 1:
            raise ValueError("propensity must lie in (0, 1)")
        return v

    @field_validator("estimators")
    def validate_estimators(cls, v):
        if not v:
            raise ValueError("at least one estimator is required")
        return [name for name in ALL_ESTIMATORS if name in v]

    @field_validator("threads")
    def validate_threads(cls, v):
        if v < 1:
            raise ValueError("threads must be at least 1")
        return v

    def seeded(self) -> "RunConfig":
        """Copy whose learners and CV folds follow the run seed."""
        return self.model_copy(update={
            "selection": self.selection.model_copy(update={"seed": self.seed}),
            "boosting": self.boosting.model_copy(update={"seed": self.seed}),
        })
