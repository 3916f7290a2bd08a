import logging
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import ConvergenceError, HybridControlError
from hybrid_control.models.dataset import TrialDataset
from hybrid_control.models.estimate import EstimateReport
from hybrid_control.models.run_config import ALL_ESTIMATORS, RunConfig
from hybrid_control.models.selection import SelectionConfig
from hybrid_control.models.simulation import MetricsCell, MetricsTable, OracleRecord, ScenarioConfig
from hybrid_control.services.estimator_service import EstimatorService
from hybrid_control.services.nuisance_service import NuisanceService
from hybrid_control.services.pipeline_service import PipelineService

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence]
ESTIMATION_FAILURES = (HybridControlError, ValueError, np.linalg.LinAlgError)


class SimulationService:
    """Synthetic trial + EC generation, propensity pre-matching and Monte Carlo metrics"""

    @staticmethod
    def expanded_covariates(X: np.ndarray) -> np.ndarray:
        """X^w = [X, X_{P-1}^2, X_P^2, X_{P-1}^3, X_P^3]."""
        tail = X[:, -2:]
        return np.column_stack([X, tail ** 2, tail ** 3])

    @staticmethod
    def selection_index(config: ScenarioConfig, X: np.ndarray) -> np.ndarray:
        """Linear predictor of the trial-membership model, without the confounder term."""
        eta = np.asarray(config.eta)
        if config.sp_choice == "W":
            return config.intercept + SimulationService.expanded_covariates(X) @ eta
        return config.intercept + X @ eta[:config.p]

    @staticmethod
    def trial_covariate_mean(config: ScenarioConfig) -> np.ndarray:
        """Population E[X | R = 1] under the scenario's membership model.

        Importance-weighted Monte Carlo over Config.TRIAL_MEAN_DRAWS draws
        with a fixed seed, cached per membership model.
        """
        key = (config.p, config.rho, config.sp_choice, tuple(config.eta), config.intercept, config.omega)
        return _trial_covariate_mean(key)

    @staticmethod
    def generate_dataset(config: ScenarioConfig, rep_seed: SeedLike) -> Tuple[TrialDataset, OracleRecord]:
        """Draw one trial + EC dataset at the null effect.

        Source membership is drawn from the selection propensity in batches
        until both strata can be filled, then truncated to (N_R, N_E) exactly.
        """
        rng = np.random.default_rng(rep_seed)
        p, n_rpct, n_ec = config.p, config.n_rpct, config.n_ec
        correlation = np.full((p, p), config.rho)
        np.fill_diagonal(correlation, 1.0)
        beta = np.asarray(config.beta)
        alpha = np.asarray(config.alpha_coef)

        def om_basis(X):
            return SimulationService.expanded_covariates(X) @ beta if config.om_choice == "W" else X @ beta[:p]

        trial, external = [], []
        n_trial = n_external = 0
        batch = max(n_rpct + n_ec, 64)
        for _ in range(config.max_batches):
            X = rng.multivariate_normal(np.zeros(p), correlation, size=batch, method="cholesky")
            U = rng.standard_normal(batch)
            in_trial = rng.random(batch) < expit(SimulationService.selection_index(config, X) + config.omega * U)
            trial.append((X[in_trial], U[in_trial]))
            external.append((X[~in_trial], U[~in_trial]))
            n_trial += int(in_trial.sum())
            n_external += int((~in_trial).sum())
            if n_trial >= n_rpct and n_external >= n_ec:
                break
        else:
            raise ConvergenceError(
                f"Source sampling did not fill the strata within {config.max_batches} batches",
                {"trial": n_trial, "external": n_external, "needed": [n_rpct, n_ec]},
            )

        X_r = np.concatenate([x for x, _ in trial])[:n_rpct]
        U_r = np.concatenate([u for _, u in trial])[:n_rpct]
        X_e = np.concatenate([x for x, _ in external])[:n_ec]
        U_e = np.concatenate([u for _, u in external])[:n_ec]

        A_r = np.zeros(n_rpct, dtype=int)
        A_r[rng.permutation(n_rpct)[:config.n_treated]] = 1

        sigma, omega = config.sigma_y, config.omega
        tau_x = config.null_effect + (X_r - SimulationService.trial_covariate_mean(config)) @ alpha
        mu0_r = om_basis(X_r) + omega * U_r * sigma
        Y_r = mu0_r + A_r * tau_x + sigma * rng.standard_normal(n_rpct)

        mu0_at_ec = om_basis(X_e) + omega * U_e * sigma
        mu0_ec = om_basis(X_e) + omega * U_e * sigma + omega * sigma
        Y_e = mu0_ec + sigma * rng.standard_normal(n_ec)

        dataset = TrialDataset(
            source=np.concatenate([np.zeros(n_rpct, dtype=int), np.ones(n_ec, dtype=int)]),
            treatment=np.concatenate([A_r, np.zeros(n_ec, dtype=int)]),
            outcome=np.concatenate([Y_r, Y_e]),
            covariates=np.vstack([X_r, X_e]),
            propensity=config.n_treated / n_rpct,
        )
        oracle = OracleRecord(
            tau=config.null_effect,
            ec_bias=mu0_ec - mu0_at_ec,
            confounder=np.concatenate([U_r, U_e]),
        )
        return dataset, oracle

    @staticmethod
    def prematch_mask(dataset: TrialDataset, e_hat: np.ndarray, n_needed: int) -> np.ndarray:
        """Records kept by greedy 1-NN matching on e_hat without replacement.

        RPCT records serve as anchors in record order (cycling when more ECs
        are needed than anchors exist); each anchor takes the nearest
        unmatched EC, ties to the lower record index.
        """
        e_hat = np.asarray(e_hat, dtype=float)
        if e_hat.shape[0] != dataset.n:
            raise ValueError("inclusion scores must cover every record")
        ec_index = np.flatnonzero(dataset.ec_mask)
        if n_needed > ec_index.size:
            raise ValueError(f"cannot match {n_needed} external controls out of {ec_index.size}")
        keep = dataset.rpct_mask.copy()
        if n_needed == ec_index.size:
            keep[ec_index] = True
            return keep

        anchors = e_hat[dataset.rpct_mask]
        scores = e_hat[ec_index]
        available = np.ones(ec_index.size, dtype=bool)
        for j in range(max(n_needed, 0)):
            distance = np.where(available, np.abs(scores - anchors[j % anchors.size]), np.inf)
            pick = int(np.argmin(distance))
            available[pick] = False
            keep[ec_index[pick]] = True
        return keep

    @staticmethod
    def nn_prematch(dataset: TrialDataset, e_hat: np.ndarray, n_needed: int) -> TrialDataset:
        return dataset.subset(SimulationService.prematch_mask(dataset, e_hat, n_needed))

    @staticmethod
    def inclusion_scores(dataset: TrialDataset) -> np.ndarray:
        model = NuisanceService.fit_logistic(dataset.covariates, dataset.rpct_mask.astype(float), fitted_on="inclusion")
        return model.predict_proba(dataset.covariates)

    @staticmethod
    def estimate_all(dataset: TrialDataset, config: RunConfig) -> Dict[str, Optional[EstimateReport]]:
        """Every requested estimator; a failing estimator maps to None instead of aborting the rest."""
        try:
            return dict(PipelineService.run(dataset, config).reports)
        except ESTIMATION_FAILURES as e:
            logger.debug("Joint estimation failed (%s); retrying estimators one at a time", e)
        reports: Dict[str, Optional[EstimateReport]] = {}
        for name in config.estimators:
            try:
                single = config.model_copy(update={"estimators": [name]})
                reports[name] = PipelineService.run(dataset, single).reports[name]
            except ESTIMATION_FAILURES as e:
                logger.debug("Estimator %s failed: %s", name, e)
                reports[name] = None
        return reports

    @staticmethod
    def replicate(
        config: ScenarioConfig,
        index: int,
        estimators: Sequence[str],
        alpha: float = Config.ALPHA,
        selection: Optional[SelectionConfig] = None,
    ) -> Dict[str, Optional[Dict[str, float]]]:
        """One replication: null-effect and common-random-numbers alternative datasets, every estimator."""
        data_seed, run_seed = np.random.SeedSequence([config.seed, index]).spawn(2)
        dataset, oracle = SimulationService.generate_dataset(config, data_seed)
        if config.prematch:
            n_needed = config.n_treated - config.n_control
            if n_needed > 0:
                e_hat = SimulationService.inclusion_scores(dataset)
                dataset = SimulationService.nn_prematch(dataset, e_hat, min(n_needed, dataset.n_ec))
        shift = config.alt_effect - config.null_effect
        alternative = dataset.with_outcome(dataset.outcome + shift * dataset.treatment)

        run_config = RunConfig(
            estimators=list(estimators),
            alpha=alpha,
            seed=int(run_seed.generate_state(1)[0]),
            selection=selection or SelectionConfig(),
        )
        null_reports = SimulationService.estimate_all(dataset, run_config)
        alt_reports = SimulationService.estimate_all(alternative, run_config)

        out: Dict[str, Optional[Dict[str, float]]] = {}
        for name in run_config.estimators:
            null, alt = null_reports.get(name), alt_reports.get(name)
            if null is None or alt is None:
                out[name] = None
                continue
            try:
                type1 = EstimatorService.hypothesis_test(null, oracle.tau, "two-sided", alpha).reject
                power = EstimatorService.hypothesis_test(alt, config.null_effect, "greater", alpha).reject
            except HybridControlError:
                out[name] = None
                continue
            out[name] = {
                "tau_hat": null.tau_hat,
                "std_error": null.std_error,
                "covered": float(null.ci_low <= oracle.tau <= null.ci_high),
                "ci_width": null.ci_high - null.ci_low,
                "reject_null": float(type1),
                "reject_alt": float(power),
                "n_borrowed": float(null.n_borrowed),
            }
        return out

    @staticmethod
    def run_replications(
        config: ScenarioConfig,
        estimators: Sequence[str] = ALL_ESTIMATORS,
        alpha: float = Config.ALPHA,
        threads: int = 1,
        selection: Optional[SelectionConfig] = None,
    ) -> MetricsTable:
        """Monte Carlo metrics for one scenario cell; replication r is seeded by (config.seed, r)."""
        def task(index: int):
            return SimulationService.replicate(config, index, estimators, alpha, selection)

        indices = range(config.replications)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                results = list(executor.map(task, indices))
        else:
            results = [task(r) for r in indices]

        names = [name for name in ALL_ESTIMATORS if name in estimators]
        rows = [SimulationService.summarize(config, name, [r[name] for r in results]) for name in names]
        for row in rows:
            if row.failures:
                logger.warning("%s %s: %d of %d replications failed", config.label, row.estimator, row.failures, row.replications)
        return MetricsTable(cell=config.label, scenario=config.model_dump(), rows=rows)

    @staticmethod
    def summarize(config: ScenarioConfig, estimator: str, outcomes: List[Optional[Dict[str, float]]]) -> MetricsCell:
        done = [o for o in outcomes if o is not None]
        failures = len(outcomes) - len(done)
        if not done:
            nan = float("nan")
            return MetricsCell(
                estimator=estimator, cell=config.label, n_control=config.n_control, replications=len(outcomes),
                failures=failures, bias=nan, variance=nan, mse=nan, type1_error=nan, power=nan, coverage=nan,
                ci_width=nan, mean_se=nan, mean_borrowed=nan, bias_mcse=nan, variance_mcse=nan, mse_mcse=nan,
                type1_error_mcse=nan, power_mcse=nan, coverage_mcse=nan,
            )

        n = len(done)
        estimates = np.array([o["tau_hat"] for o in done])
        errors = estimates - config.null_effect
        variance = float(estimates.var())
        centered = estimates - estimates.mean()

        def proportion(key: str) -> Tuple[float, float]:
            rate = float(np.mean([o[key] for o in done]))
            return rate, float(np.sqrt(rate * (1 - rate) / n))

        type1, type1_se = proportion("reject_null")
        power, power_se = proportion("reject_alt")
        coverage, coverage_se = proportion("covered")
        return MetricsCell(
            estimator=estimator,
            cell=config.label,
            n_control=config.n_control,
            replications=len(outcomes),
            failures=failures,
            bias=float(errors.mean()),
            variance=variance,
            mse=float(np.mean(errors ** 2)),
            type1_error=type1,
            power=power,
            coverage=coverage,
            ci_width=float(np.mean([o["ci_width"] for o in done])),
            mean_se=float(np.mean([o["std_error"] for o in done])),
            mean_borrowed=float(np.mean([o["n_borrowed"] for o in done])),
            bias_mcse=float(np.sqrt(variance / n)),
            variance_mcse=float(np.sqrt(max(np.mean(centered ** 4) - variance ** 2, 0.0) / n)),
            mse_mcse=float(np.std(errors ** 2) / np.sqrt(n)),
            type1_error_mcse=type1_se,
            power_mcse=power_se,
            coverage_mcse=coverage_se,
        )

    @staticmethod
    def probability_of_success(
        dataset: TrialDataset,
        n_controls: int,
        n_subsamples: int,
        threshold: float = 0.0,
        side: str = "greater",
        config: Optional[RunConfig] = None,
        seed: int = 0,
    ) -> Dict[str, Dict[str, float]]:
        """Share of control-arm subsamples of size n_controls whose test rejects tau = threshold.

        Treated and external records are always kept; only the RPCT control
        arm is resampled without replacement.
        """
        config = config or RunConfig()
        control = np.flatnonzero(dataset.rpct_mask & (dataset.treatment == 0))
        if not 1 <= n_controls <= control.size:
            raise ValueError(f"n_controls must lie in [1, {control.size}]")
        rng = np.random.default_rng(seed)
        rejections = {name: [] for name in config.estimators}
        for s in range(n_subsamples):
            keep = ~(dataset.rpct_mask & (dataset.treatment == 0))
            keep[rng.choice(control, size=n_controls, replace=False)] = True
            reports = SimulationService.estimate_all(
                dataset.subset(keep), config.model_copy(update={"seed": config.seed + s})
            )
            for name, report in reports.items():
                if report is None:
                    continue
                try:
                    rejections[name].append(EstimatorService.hypothesis_test(report, threshold, side).reject)
                except HybridControlError:
                    pass
        return {
            name: {
                "probability": float(np.mean(values)) if values else float("nan"),
                "subsamples": len(values),
                "failures": n_subsamples - len(values),
            }
            for name, values in rejections.items()
        }


@lru_cache(maxsize=64)
def _trial_covariate_mean(key: Tuple) -> np.ndarray:
    p, rho, sp_choice, eta, intercept, omega = key
    config = ScenarioConfig(p=p, rho=rho, sp_choice=sp_choice, eta=list(eta), eta0=intercept, omega=omega)
    rng = np.random.default_rng(Config.COEFFICIENT_SEED)
    correlation = np.full((p, p), rho)
    np.fill_diagonal(correlation, 1.0)
    X = rng.multivariate_normal(np.zeros(p), correlation, size=Config.TRIAL_MEAN_DRAWS, method="cholesky")
    U = rng.standard_normal(Config.TRIAL_MEAN_DRAWS)
    membership = expit(SimulationService.selection_index(config, X) + omega * U)
    mean = membership @ X / membership.sum()
    mean.setflags(write=False)
    return mean
