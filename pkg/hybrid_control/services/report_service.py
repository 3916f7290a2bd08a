import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from hybrid_control.core.config import Config
from hybrid_control.models.dataset import TrialDataset
from hybrid_control.models.estimate import EstimateReport, PipelineResult, PooledEstimate
from hybrid_control.models.simulation import MetricsTable
from hybrid_control.services.estimator_service import EstimatorService
from hybrid_control.services.multisource_service import MultisourceService

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ReportService:
    """JSON and CSV artifacts for estimate and simulate runs"""

    @staticmethod
    def write_json(payload: Dict[str, Any], path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as file:
            json.dump(payload, file, indent=2, default=_to_builtin, allow_nan=True)
            file.write("\n")

    @staticmethod
    def estimate_row(report: EstimateReport) -> Dict[str, Any]:
        decision = EstimatorService.hypothesis_test(report, 0.0, "two-sided") if report.variance > 0 else None
        return {
            "estimator": report.estimator,
            "tau_hat": report.tau_hat,
            "std_error": report.std_error,
            "ci_low": report.ci_low,
            "ci_high": report.ci_high,
            "n_borrowed": report.n_borrowed,
            "p_value": decision.p_value if decision else None,
        }

    @staticmethod
    def pooled_row(pooled: PooledEstimate) -> Dict[str, Any]:
        p_value = float(2 * norm.sf(abs(pooled.tau_star) / pooled.std_error)) if pooled.std_error > 0 else None
        return {
            "estimator": pooled.estimator,
            "tau_hat": pooled.tau_star,
            "std_error": pooled.std_error,
            "ci_low": pooled.ci_low,
            "ci_high": pooled.ci_high,
            "n_borrowed": sum(r.n_borrowed for r in pooled.per_group),
            "p_value": p_value,
        }

    @staticmethod
    def group_payload(result: PipelineResult) -> Dict[str, Any]:
        return {
            "reports": {name: report.model_dump() for name, report in result.reports.items()},
            "selection": result.selections,
            "calibration": result.calibration,
            "models": result.models,
        }

    @staticmethod
    def build_estimate_report(
        dataset: TrialDataset,
        results: Dict[int, PipelineResult],
        pooled: Dict[str, PooledEstimate],
        resolved_config: Dict[str, Any],
        seed: int,
    ) -> Dict[str, Any]:
        """report.json layout: one estimates table plus per-group detail and pooling."""
        groups = sorted(results)
        first = results[groups[0]]
        rows: List[Dict[str, Any]] = []
        for name, report in first.reports.items():
            if name in pooled:
                rows.append(ReportService.pooled_row(pooled[name]))
            else:
                rows.append(ReportService.estimate_row(report))
        return {
            "version": Config.VERSION,
            "seed": seed,
            "config": resolved_config,
            "group_sizes": dataset.group_sizes,
            "estimates": rows,
            "groups": {str(k): ReportService.group_payload(results[k]) for k in groups},
            "pooled": {name: p.model_dump() for name, p in pooled.items()},
        }

    @staticmethod
    def influence_frame(dataset: TrialDataset, results: Dict[int, PipelineResult]) -> pd.DataFrame:
        frame = pd.DataFrame({"record_id": list(dataset.record_ids)})
        for k in sorted(results):
            for name, report in results[k].reports.items():
                column = name if len(results) == 1 else f"{name}_group{k}"
                frame[column] = MultisourceService.extend_influence(report.influence_values, results[k].record_mask)
        return frame

    @staticmethod
    def write_estimate_outputs(
        out_dir: PathLike,
        payload: Dict[str, Any],
        results: Dict[int, PipelineResult],
        dataset: TrialDataset,
        write_influence: bool = False,
    ) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []

        selection = [f for k in sorted(results) for f in results[k].selection_frames]
        path = out_dir / "selection.csv"
        if selection:
            pd.concat(selection, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
        else:
            pd.DataFrame(columns=["group", "estimator", "ec_record_id", "b_hat", "xi_hat", "b_tilde", "selected"]).to_csv(path, index=False)
        written.append(path)

        weights = [f for k in sorted(results) for f in results[k].weights_frames]
        path = out_dir / "weights.csv"
        if weights:
            pd.concat(weights, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
        else:
            pd.DataFrame(columns=["group", "record_id", "weight", "density_ratio_weight"]).to_csv(path, index=False)
        written.append(path)

        if write_influence:
            path = out_dir / "influence.csv"
            ReportService.influence_frame(dataset, results).to_csv(path, index=False, float_format="%.17g")
            written.append(path)

        path = out_dir / "report.json"
        ReportService.write_json(payload, path)
        written.append(path)
        logger.info("Wrote %s", ", ".join(p.name for p in written))
        return written

    @staticmethod
    def write_metrics(table: MetricsTable, out_dir: PathLike) -> List[Path]:
        """metrics_<cell>.csv and metrics_<cell>.json; contents depend only on config and seed."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"metrics_{table.cell}.csv"
        json_path = out_dir / f"metrics_{table.cell}.json"
        pd.DataFrame([row.model_dump() for row in table.rows]).to_csv(csv_path, index=False, float_format="%.17g")
        ReportService.write_json(table.model_dump(), json_path)
        return [csv_path, json_path]

    @staticmethod
    def read_metrics(path: PathLike) -> MetricsTable:
        with open(path, "r", encoding="utf-8") as file:
            return MetricsTable.model_validate(json.load(file))
