from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator


class ColumnSchema(BaseModel):
    """Maps CSV columns onto the dataset fields."""
    source: str = "source"
    treatment: str = "treatment"
    outcome: str = "outcome"
    covariates: List[str]
    propensity: Optional[str] = None
    record_id: Optional[str] = None

    @field_validator("covariates")
    def validate_covariates(cls, v):
        if not v:
            raise ValueError("at least one covariate column is required")
        if len(v) != len(set(v)):
            raise ValueError("duplicate covariate columns")
        return v


class Violation(BaseModel):
    """A single broken dataset rule; `row` is None for file- or dataset-level problems."""
    row: Optional[int] = None
    field: str
    rule: str
    message: str


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Trial records plus K external control groups, stored column-wise.

    Arrays are made read-only on construction so a dataset can be shared
    between worker threads.
    """
    source: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    propensity: np.ndarray
    covariate_names: Tuple[str, ...] = ()
    record_ids: Tuple[str, ...] = ()
    positivity_eps: float = 1e-6
    _sizes: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        source = np.array(self.source, dtype=int)
        treatment = np.array(self.treatment, dtype=int)
        outcome = np.array(self.outcome, dtype=float)
        covariates = np.array(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        n = source.shape[0]
        propensity = np.broadcast_to(np.asarray(self.propensity, dtype=float), (n,)).copy()
        for name, arr in (("treatment", treatment), ("outcome", outcome), ("covariates", covariates)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for arr in (source, treatment, outcome, covariates, propensity):
            arr.setflags(write=False)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "treatment", treatment)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "propensity", propensity)
        if not self.covariate_names:
            names = tuple(f"x{j + 1}" for j in range(covariates.shape[1]))
            object.__setattr__(self, "covariate_names", names)
        if not self.record_ids:
            object.__setattr__(self, "record_ids", tuple(str(i) for i in range(n)))
        sizes = {
            "n_rpct": int(np.sum(source == 0)),
            "n_treated": int(np.sum((source == 0) & (treatment == 1))),
            "n_control": int(np.sum((source == 0) & (treatment == 0))),
        }
        for k in np.unique(source[source > 0]):
            sizes[f"n_ec_{int(k)}"] = int(np.sum(source == k))
        sizes["n_ec"] = int(np.sum(source > 0))
        object.__setattr__(self, "_sizes", sizes)

    @property
    def n(self) -> int:
        return int(self.source.shape[0])

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def group_sizes(self) -> Dict[str, int]:
        return dict(self._sizes)

    @property
    def n_rpct(self) -> int:
        return self._sizes["n_rpct"]

    @property
    def n_treated(self) -> int:
        return self._sizes["n_treated"]

    @property
    def n_control(self) -> int:
        return self._sizes["n_control"]

    @property
    def n_ec(self) -> int:
        return self._sizes["n_ec"]

    @property
    def rpct_mask(self) -> np.ndarray:
        return self.source == 0

    @property
    def ec_mask(self) -> np.ndarray:
        return self.source > 0

    @property
    def ec_groups(self) -> List[int]:
        return [int(k) for k in np.unique(self.source[self.source > 0])]

    def subset(self, mask: np.ndarray) -> "TrialDataset":
        mask = np.asarray(mask)
        index = np.flatnonzero(mask) if mask.dtype == bool else mask
        return TrialDataset(
            source=self.source[index],
            treatment=self.treatment[index],
            outcome=self.outcome[index],
            covariates=self.covariates[index],
            propensity=self.propensity[index],
            covariate_names=self.covariate_names,
            record_ids=tuple(self.record_ids[i] for i in index),
            positivity_eps=self.positivity_eps,
        )

    def restrict_to_group(self, group: int) -> "TrialDataset":
        """RPCT records plus EC group `group`, in original record order."""
        return self.subset((self.source == 0) | (self.source == group))

    def with_outcome(self, outcome: np.ndarray) -> "TrialDataset":
        return TrialDataset(
            source=self.source,
            treatment=self.treatment,
            outcome=outcome,
            covariates=self.covariates,
            propensity=self.propensity,
            covariate_names=self.covariate_names,
            record_ids=self.record_ids,
            positivity_eps=self.positivity_eps,
        )
