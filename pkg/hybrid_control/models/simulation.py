from dataclasses import dataclass
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from hybrid_control.core.config import Config
from hybrid_control.models.run_config import ALL_ESTIMATORS, EstimatorName
from hybrid_control.models.selection import SelectionConfig


class ScenarioConfig(BaseModel):
    """One simulation cell: model forms, sizes, confounding strength and frozen coefficients.

    sp_choice / om_choice pick the linear ("C") or the X^w ("W") form of the
    selection propensity and the control outcome mean. eta and beta act on
    X^w = [X, X_{P-1}^2, X_P^2, X_{P-1}^3, X_P^3] (the first P entries are
    used under "C"); alpha_coef drives effect heterogeneity and is centered
    on the population trial covariate mean E[X | R = 1], so the population
    trial-average effect is null_effect.
    """
    sp_choice: Literal["C", "W"] = "C"
    om_choice: Literal["C", "W"] = "C"
    omega: float = 0.0
    n_control: int = 50
    n_treated: int = 200
    n_ec: int = 500
    sigma_y: float = 1.0
    null_effect: float = 0.0
    alt_effect: float = 0.3
    p: int = 12
    rho: float = 0.2
    eta0: Optional[float] = None
    eta: List[float] = []
    beta: List[float] = []
    alpha_coef: List[float] = []
    replications: int = 500
    seed: int = 0
    prematch: bool = True
    max_batches: int = Config.REJECTION_BATCHES

    @field_validator("omega")
    def validate_omega(cls, v):
        if v < 0:
            raise ValueError("omega must be nonnegative")
        return v

    @field_validator("sigma_y")
    def validate_sigma_y(cls, v):
        if v <= 0:
            raise ValueError("sigma_y must be positive")
        return v

    @field_validator("p")
    def validate_p(cls, v):
        if v < 2:
            raise ValueError("at least two covariates are required")
        return v

    @model_validator(mode="after")
    def fill_coefficients(self):
        if min(self.n_control, self.n_treated, self.n_ec, self.replications) < 1:
            raise ValueError("sizes and replications must be positive")
        if not -1.0 / (self.p - 1) < self.rho < 1.0:
            raise ValueError("rho must keep the exchangeable correlation matrix positive definite")
        rng = np.random.default_rng(Config.COEFFICIENT_SEED)
        drawn = {
            "eta": rng.uniform(-0.5, 0.5, self.p + 4),
            "beta": rng.uniform(-0.5, 0.5, self.p + 4),
            "alpha_coef": rng.uniform(-0.5, 0.5, self.p),
        }
        for name, length in (("eta", self.p + 4), ("beta", self.p + 4), ("alpha_coef", self.p)):
            values = getattr(self, name)
            if not values:
                setattr(self, name, drawn[name].tolist())
            elif len(values) != length:
                raise ValueError(f"{name} must have {length} entries")
        return self

    @property
    def n_rpct(self) -> int:
        return self.n_control + self.n_treated

    @property
    def intercept(self) -> float:
        return self.eta0 if self.eta0 is not None else float(np.log(self.n_rpct / self.n_ec))

    @property
    def label(self) -> str:
        return f"{self.sp_choice}{self.om_choice}_omega{self.omega:g}_nc{self.n_control}"


class SimulationGridConfig(BaseModel):
    """Cartesian grid of scenarios x confounding levels x trial control sizes."""
    base: ScenarioConfig = Field(default_factory=ScenarioConfig)
    scenarios: List[str] = ["CC"]
    omega_grid: List[float] = [0.0]
    n_control_grid: List[int] = [50]
    estimators: List[EstimatorName] = list(ALL_ESTIMATORS)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    alpha: float = Config.ALPHA
    threads: int = 1

    @field_validator("scenarios")
    def validate_scenarios(cls, v):
        bad = [s for s in v if len(s) != 2 or any(c not in "CW" for c in s)]
        if not v or bad:
            raise ValueError(f"scenarios must be two-letter C/W codes, got {bad or v}")
        return v

    @field_validator("alpha")
    def validate_alpha(cls, v):
        if not 0 < v < 1:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    def cells(self) -> List[ScenarioConfig]:
        out = []
        for scenario in self.scenarios:
            for omega in self.omega_grid:
                for n_control in self.n_control_grid:
                    out.append(self.base.model_copy(update={
                        "sp_choice": scenario[0], "om_choice": scenario[1],
                        "omega": omega, "n_control": n_control,
                    }))
        return out


@dataclass(frozen=True, eq=False)
class OracleRecord:
    """Ground truth of a simulated dataset: true effect and the planted per-EC bias."""
    tau: float
    ec_bias: np.ndarray
    confounder: np.ndarray


class MetricsCell(BaseModel):
    estimator: str
    cell: str
    n_control: int
    replications: int
    failures: int
    bias: float
    variance: float
    mse: float
    type1_error: float
    power: float
    coverage: float
    ci_width: float
    mean_se: float
    mean_borrowed: float
    bias_mcse: float
    variance_mcse: float
    mse_mcse: float
    type1_error_mcse: float
    power_mcse: float
    coverage_mcse: float


class MetricsTable(BaseModel):
    cell: str
    scenario: Dict[str, object]
    rows: List[MetricsCell]

    def row(self, estimator: str) -> MetricsCell:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)
