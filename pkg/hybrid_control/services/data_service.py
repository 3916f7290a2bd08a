import json
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import DataValidationError
from hybrid_control.models.dataset import ColumnSchema, TrialDataset, Violation

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DataService:
    """CSV ingestion and dataset validation"""

    @staticmethod
    def ingest_csv(
        path: PathLike,
        schema: ColumnSchema,
        propensity: Optional[float] = None,
        positivity_eps: float = Config.POSITIVITY_EPS,
    ) -> TrialDataset:
        """Read a trial + external control CSV into a validated TrialDataset.

        `propensity` is the design's constant treatment probability; it is
        ignored when the schema names a propensity column. With neither, the
        completely randomized design N_t / N_R is assumed.
        """
        path = Path(path)
        if not path.exists():
            raise DataValidationError(
                f"Input file not found: {path}",
                [Violation(field="path", rule="missing_file", message=f"{path} does not exist")],
            )

        frame = DataService._read_csv(path, dtype=str, keep_default_na=False)
        violations = DataService._check_columns(frame, schema)
        if violations:
            raise DataValidationError("Input file is missing required columns", violations)

        numeric_columns = [schema.source, schema.treatment, schema.outcome] + list(schema.covariates)
        if schema.propensity:
            numeric_columns.append(schema.propensity)

        for column in numeric_columns:
            raw = frame[column].str.strip()
            parsed = pd.to_numeric(raw, errors="coerce")
            for row in np.flatnonzero(parsed.isna().to_numpy()):
                if raw.iloc[row] == "":
                    violations.append(Violation(
                        row=int(row), field=column, rule="missing_value",
                        message=f"row {row}: missing value in column '{column}'",
                    ))
                else:
                    violations.append(Violation(
                        row=int(row), field=column, rule="non_numeric",
                        message=f"row {row}: non-numeric value '{raw.iloc[row]}' in column '{column}'",
                    ))
        if violations:
            raise DataValidationError("Input file contains invalid cells", violations)

        values = DataService._read_numeric(path, numeric_columns)

        source = values[schema.source]
        treatment = values[schema.treatment]
        for name, column in (("source", source), ("treatment", treatment)):
            bad = np.flatnonzero(column != np.round(column))
            for row in bad:
                violations.append(Violation(
                    row=int(row), field=name, rule="non_integer",
                    message=f"row {row}: {name} must be an integer",
                ))
        if violations:
            raise DataValidationError("Input file contains invalid cells", violations)

        if schema.propensity:
            pi_a = values[schema.propensity]
        else:
            rpct = source == 0
            pi_a = propensity if propensity is not None else (
                float(np.mean(treatment[rpct])) if rpct.any() else 0.5
            )

        record_ids = tuple(frame[schema.record_id].tolist()) if schema.record_id else ()
        dataset = TrialDataset(
            source=source.astype(int),
            treatment=treatment.astype(int),
            outcome=values[schema.outcome],
            covariates=np.column_stack([values[c] for c in schema.covariates]),
            propensity=pi_a,
            covariate_names=tuple(schema.covariates),
            record_ids=record_ids,
            positivity_eps=positivity_eps,
        )
        violations = DataService.validate(dataset)
        if violations:
            raise DataValidationError(f"Dataset failed validation with {len(violations)} violation(s)", violations)

        logger.info("Ingested %s: %s", path, dataset.group_sizes)
        return dataset

    @staticmethod
    def infer_schema(path: PathLike) -> ColumnSchema:
        """Default column names; every other column is a covariate."""
        path = Path(path)
        if not path.exists():
            raise DataValidationError(
                f"Input file not found: {path}",
                [Violation(field="path", rule="missing_file", message=f"{path} does not exist")],
            )
        header = list(DataService._read_csv(path, nrows=0).columns)
        propensity = "propensity" if "propensity" in header else None
        record_id = "record_id" if "record_id" in header else None
        reserved = {"source", "treatment", "outcome", propensity, record_id}
        covariates = [c for c in header if c not in reserved]
        if not covariates:
            raise DataValidationError(
                "Input file has no covariate columns",
                [Violation(field="covariates", rule="missing_column", message="no covariate columns found")],
            )
        return ColumnSchema(covariates=covariates, propensity=propensity, record_id=record_id)

    @staticmethod
    def validate(dataset: TrialDataset) -> List[Violation]:
        """Check the dataset invariants; an empty list means the dataset is usable."""
        violations: List[Violation] = []

        for row in np.flatnonzero(dataset.source < 0):
            violations.append(Violation(
                row=int(row), field="source", rule="invalid_source",
                message=f"row {row}: negative source id",
            ))
        for row in np.flatnonzero(~np.isin(dataset.treatment, (0, 1))):
            violations.append(Violation(
                row=int(row), field="treatment", rule="non_binary_treatment",
                message=f"row {row}: treatment must be 0 or 1",
            ))
        for row in np.flatnonzero(dataset.ec_mask & (dataset.treatment != 0)):
            violations.append(Violation(
                row=int(row), field="treatment", rule="ec_treated",
                message=f"row {row}: EC treated subject",
            ))
        for row in np.flatnonzero(~np.isfinite(dataset.outcome)):
            violations.append(Violation(
                row=int(row), field="outcome", rule="non_finite",
                message=f"row {row}: outcome is missing or not finite",
            ))
        bad_x = ~np.isfinite(dataset.covariates)
        for row, col in zip(*np.nonzero(bad_x)):
            name = dataset.covariate_names[col]
            violations.append(Violation(
                row=int(row), field=name, rule="non_finite",
                message=f"row {row}: covariate '{name}' is missing or not finite",
            ))

        eps = dataset.positivity_eps
        pi_a = dataset.propensity
        positivity = dataset.rpct_mask & ~((pi_a > eps) & (pi_a < 1.0 - eps))
        for row in np.flatnonzero(positivity):
            violations.append(Violation(
                row=int(row), field="propensity", rule="positivity",
                message=f"row {row}: treatment propensity {pi_a[row]} outside ({eps}, {1 - eps})",
            ))

        if dataset.n_treated < 1:
            violations.append(Violation(
                field="treatment", rule="empty_treated_arm", message="RPCT has no treated subjects",
            ))
        if dataset.n_control < 1:
            violations.append(Violation(
                field="treatment", rule="empty_control_arm", message="RPCT has no control subjects",
            ))

        sizes = dataset.group_sizes
        if sizes["n_rpct"] != sizes["n_treated"] + sizes["n_control"]:
            violations.append(Violation(
                field="source", rule="group_sizes",
                message="RPCT size differs from treated + control counts",
            ))
        return violations

    @staticmethod
    def emit_csv(dataset: TrialDataset, path: PathLike, schema: Optional[ColumnSchema] = None) -> ColumnSchema:
        """Write a dataset so that `ingest_csv` reads it back bit-exactly."""
        schema = schema or ColumnSchema(
            covariates=list(dataset.covariate_names), propensity="propensity", record_id="record_id"
        )
        frame = pd.DataFrame({schema.source: dataset.source, schema.treatment: dataset.treatment})
        frame[schema.outcome] = dataset.outcome
        for j, name in enumerate(schema.covariates):
            frame[name] = dataset.covariates[:, j]
        if schema.propensity:
            frame[schema.propensity] = dataset.propensity
        if schema.record_id:
            frame.insert(0, schema.record_id, list(dataset.record_ids))
        frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
        return schema

    @staticmethod
    def write_violations(violations: List[Violation], stream) -> None:
        """JSON lines: one {row, field, rule, message} object per violation."""
        for violation in violations:
            stream.write(json.dumps(violation.model_dump()) + "\n")

    @staticmethod
    def _check_columns(frame: pd.DataFrame, schema: ColumnSchema) -> List[Violation]:
        required = [schema.source, schema.treatment, schema.outcome] + list(schema.covariates)
        if schema.propensity:
            required.append(schema.propensity)
        if schema.record_id:
            required.append(schema.record_id)
        return [
            Violation(field=column, rule="missing_column", message=f"missing column '{column}'")
            for column in required
            if column not in frame.columns
        ]

    @staticmethod
    def _read_numeric(path: Path, columns: List[str]) -> dict:
        # round_trip parsing keeps values written by emit_csv bit-exact
        frame = DataService._read_csv(path, usecols=columns, float_precision="round_trip")
        return {c: frame[c].to_numpy(dtype=float) for c in columns}

    @staticmethod
    def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
        try:
            return pd.read_csv(path, encoding="utf-8", **kwargs)
        except pd.errors.EmptyDataError:
            raise DataValidationError(
                f"Input file is empty: {path}",
                [Violation(field="path", rule="empty_file", message=f"{path} has no header row")],
            )
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise DataValidationError(
                f"Input file is not readable CSV: {path}",
                [Violation(field="path", rule="malformed_csv", message=str(e).strip())],
            )
