import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, Optional, TextIO

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import DataValidationError
from hybrid_control.models.dataset import TrialDataset, Violation
from hybrid_control.models.estimate import PipelineResult, PooledEstimate
from hybrid_control.models.run_config import RunConfig
from hybrid_control.models.simulation import SimulationGridConfig
from hybrid_control.services.data_service import DataService
from hybrid_control.services.multisource_service import MultisourceService
from hybrid_control.services.pipeline_service import BORROWING, PipelineService
from hybrid_control.services.report_service import ReportService
from hybrid_control.services.simulation_service import SimulationService

logger = logging.getLogger(__name__)


def load_dataset(config: RunConfig) -> TrialDataset:
    if not config.input:
        raise DataValidationError(
            "No input file given",
            [Violation(field="input", rule="missing_file", message="pass --input or set 'input' in the config")],
        )
    schema = config.columns or DataService.infer_schema(config.input)
    return DataService.ingest_csv(config.input, schema, config.propensity, config.positivity_eps)


def cmd_estimate(config: RunConfig) -> int:
    """Full pipeline on a user CSV; writes report.json, selection.csv and weights.csv."""
    started = time.perf_counter()
    dataset = load_dataset(config)

    results: Dict[int, PipelineResult]
    if dataset.ec_groups:
        results = MultisourceService.run_groups(dataset, config)
    else:
        results = {0: PipelineService.run(dataset, config)}

    pooled: Dict[str, PooledEstimate] = {}
    if len(results) > 1:
        for name in config.estimators:
            if name in BORROWING:
                pooled[name] = MultisourceService.pool(dataset, results, name, config.alpha)

    payload = ReportService.build_estimate_report(
        dataset, results, pooled, config.model_dump(mode="json"), config.seed
    )
    ReportService.write_estimate_outputs(config.out, payload, results, dataset, config.write_influence)
    logger.info("estimate finished in %.2fs", time.perf_counter() - started)
    return 0


def cmd_validate(config: RunConfig, stream: Optional[TextIO] = None) -> int:
    """Violations as JSON lines followed by a summary line; exit 1 if anything is wrong."""
    stream = stream or sys.stdout
    try:
        dataset = load_dataset(config)
    except DataValidationError as e:
        DataService.write_violations(e.violations, stream)
        stream.write(json.dumps({"summary": {"valid": False, "violations": len(e.violations)}}) + "\n")
        return e.exit_code
    stream.write(json.dumps({"summary": {"valid": True, "violations": 0, "group_sizes": dataset.group_sizes}}) + "\n")
    return 0


def cmd_simulate(grid: SimulationGridConfig, out: str) -> int:
    """Monte Carlo metrics for every (scenario, omega, N_c) cell of the grid."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ReportService.write_json(
        {"version": Config.VERSION, "seed": grid.base.seed, "config": grid.model_dump(mode="json")},
        out_dir / "simulation_config.json",
    )
    for cell in grid.cells():
        started = time.perf_counter()
        table = SimulationService.run_replications(
            cell, grid.estimators, grid.alpha, grid.threads, grid.selection
        )
        ReportService.write_metrics(table, out_dir)
        logger.info("cell %s: %d replications in %.1fs", cell.label, cell.replications, time.perf_counter() - started)
    return 0
