import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import DataValidationError, SingularCovarianceError
from hybrid_control.models.dataset import TrialDataset, Violation
from hybrid_control.models.estimate import EstimateReport, PipelineResult, PooledEstimate
from hybrid_control.models.run_config import RunConfig
from hybrid_control.services.estimator_service import EstimatorService
from hybrid_control.services.pipeline_service import PipelineService

logger = logging.getLogger(__name__)


class MultisourceService:
    """Per-group pipelines over RPCT + EC group k and their inverse-covariance combination"""

    @staticmethod
    def run_group(dataset: TrialDataset, group: int, config: RunConfig) -> PipelineResult:
        if group not in dataset.ec_groups:
            raise DataValidationError(
                f"EC group {group} has no records",
                [Violation(field="source", rule="empty_group", message=f"no records with source {group}")],
            )
        result = PipelineService.run(dataset.restrict_to_group(group), config, group=group)
        mask = dataset.rpct_mask | (dataset.source == group)
        return dataclasses.replace(result, record_mask=mask)

    @staticmethod
    def estimate_per_group(
        dataset: TrialDataset, group: int, config: RunConfig, estimator: str = "acw_alasso"
    ) -> EstimateReport:
        result = MultisourceService.run_group(dataset, group, config)
        if estimator not in result.reports:
            raise ValueError(f"estimator '{estimator}' was not run")
        return result.reports[estimator]

    @staticmethod
    def run_groups(dataset: TrialDataset, config: RunConfig) -> Dict[int, PipelineResult]:
        """All group pipelines, concurrently when config.threads > 1, keyed in group order."""
        groups = dataset.ec_groups
        if config.threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=min(config.threads, len(groups))) as executor:
                results = list(executor.map(lambda k: MultisourceService.run_group(dataset, k, config), groups))
        else:
            results = [MultisourceService.run_group(dataset, k, config) for k in groups]
        return dict(zip(groups, results))

    @staticmethod
    def extend_influence(influence: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Zero-extend a group's influence vector to all N records, rescaled from N_k to N."""
        mask = np.asarray(mask, dtype=bool)
        influence = np.asarray(influence, dtype=float)
        if influence.shape[0] != int(mask.sum()):
            raise ValueError("influence vector does not match the group's records")
        extended = np.zeros(mask.shape[0])
        extended[mask] = influence * (mask.shape[0] / influence.shape[0])
        return extended

    @staticmethod
    def estimate_covariance(influence_vectors: Sequence[np.ndarray], n: int) -> np.ndarray:
        """Sigma_jk = N^-1 sum_i psi_i^[j] psi_i^[k] over zero-extended influence vectors."""
        k = len(influence_vectors)
        covariance = np.empty((k, k))
        for a in range(k):
            for b in range(a, k):
                if a == b:
                    value = EstimatorService.eif_variance(influence_vectors[a], n)
                else:
                    value = float(np.asarray(influence_vectors[a]) @ np.asarray(influence_vectors[b]) / n)
                covariance[a, b] = covariance[b, a] = value
        return covariance

    @staticmethod
    def combine(
        estimates: Sequence[EstimateReport],
        covariance: np.ndarray,
        n: int,
        groups: Optional[Sequence[int]] = None,
        alpha: float = Config.ALPHA,
        regularize: bool = True,
        estimator: Optional[str] = None,
    ) -> PooledEstimate:
        """d = Sigma^-1 1 / (1' Sigma^-1 1); tau* = d' tau; variance* = d' Sigma d."""
        covariance = np.asarray(covariance, dtype=float)
        k = len(estimates)
        if covariance.shape != (k, k):
            raise ValueError("covariance does not match the number of group estimates")
        tau = np.array([e.tau_hat for e in estimates])
        groups = list(groups) if groups is not None else list(range(1, k + 1))

        regularized = False
        if k == 1:
            d = np.ones(1)
        else:
            condition = np.linalg.cond(covariance)
            matrix = covariance
            if not np.isfinite(condition) or condition > Config.CONDITION_LIMIT:
                if not regularize:
                    raise SingularCovarianceError(
                        "Group covariance matrix is singular",
                        {"condition_number": float(condition) if np.isfinite(condition) else None},
                    )
                ridge = Config.POOLING_RIDGE * np.trace(covariance) / k
                matrix = covariance + ridge * np.eye(k)
                regularized = True
                logger.warning("Group covariance ill-conditioned (cond %.3g): added %.3g to the diagonal", condition, ridge)
            solved = np.linalg.solve(matrix, np.ones(k))
            d = solved / solved.sum()

        negative = bool(np.any(d < 0))
        if negative:
            logger.warning("Pooled weights include negative entries: %s", np.round(d, 4).tolist())
        tau_star = float(d @ tau)
        variance_star = float(covariance[0, 0]) if k == 1 else float(max(d @ covariance @ d, 0.0))
        low, high = EstimatorService.confidence_interval(tau_star, variance_star / n, alpha)
        return PooledEstimate(
            estimator=estimator or estimates[0].estimator,
            groups=groups,
            per_group=list(estimates),
            covariance=covariance.tolist(),
            weights=d.tolist(),
            tau_star=tau_star,
            variance_star=variance_star,
            std_error=float(np.sqrt(variance_star / n)),
            ci_low=low,
            ci_high=high,
            n=n,
            regularized=regularized,
            negative_weights=negative,
        )

    @staticmethod
    def pool(
        dataset: TrialDataset,
        results: Dict[int, PipelineResult],
        estimator: str,
        alpha: float = Config.ALPHA,
        regularize: bool = True,
    ) -> PooledEstimate:
        groups = sorted(results)
        reports = [results[k].reports[estimator] for k in groups]
        influence: List[np.ndarray] = [
            MultisourceService.extend_influence(results[k].reports[estimator].influence_values, results[k].record_mask)
            for k in groups
        ]
        covariance = MultisourceService.estimate_covariance(influence, dataset.n)
        return MultisourceService.combine(
            reports, covariance, dataset.n, groups=groups, alpha=alpha, regularize=regularize, estimator=estimator
        )
