import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from hybrid_control.core.exceptions import DataValidationError
from hybrid_control.models.calibration import CalibrationProblem, CalibrationWeights
from hybrid_control.models.dataset import TrialDataset, Violation
from hybrid_control.models.estimate import EifInputs, EstimateReport, PipelineResult
from hybrid_control.models.nuisance import BasisSpec, VarianceRatio
from hybrid_control.models.run_config import RunConfig
from hybrid_control.models.selection import BiasEstimates
from hybrid_control.services.calibration_service import CalibrationService
from hybrid_control.services.estimator_service import EstimatorService
from hybrid_control.services.nuisance_service import NuisanceService
from hybrid_control.services.selection_service import SelectionService

logger = logging.getLogger(__name__)

BORROWING = ("acw", "acw_alasso", "acw_alasso_gbm")


class PipelineService:
    """Single-source estimation: nuisance fits, calibration, selection and the requested estimators"""

    @staticmethod
    def run(dataset: TrialDataset, config: RunConfig, group: Optional[int] = None) -> PipelineResult:
        config = config.seeded()
        X, Y, A = dataset.covariates, dataset.outcome, dataset.treatment
        rpct, ec = dataset.rpct_mask, dataset.ec_mask
        treated = rpct & (A == 1)
        control = rpct & (A == 0)
        label = f"group {group}" if group is not None else "dataset"

        borrowing = [name for name in config.estimators if name in BORROWING]
        if borrowing and not ec.any():
            raise DataValidationError(
                "Borrowing estimators need external control records",
                [Violation(field="source", rule="no_external_controls", message="no records with source >= 1")],
            )

        mu1_model = NuisanceService.fit_ols(X[treated], Y[treated], config.outcome_basis, fitted_on="rpct_treated")
        mu0_model = NuisanceService.fit_ols(X[control], Y[control], config.outcome_basis, fitted_on="rpct_control")
        mu1 = mu1_model.predict(X)
        mu0 = mu0_model.predict(X)
        models = {"mu1": mu1_model.summary(), "mu0": mu0_model.summary()}

        reports: Dict[str, EstimateReport] = {}
        selections: Dict[str, Dict[str, object]] = {}
        selection_frames, weights_frames = [], []
        calibration: Dict[str, object] = {}

        base = dict(in_rpct=rpct, treatment=A, outcome=Y, propensity=dataset.propensity, mu1=mu1)
        if "aipw" in config.estimators:
            reports["aipw"] = EstimatorService.aipw_estimate(EifInputs(mu0=mu0, q=1.0, **base), config.alpha)

        if borrowing:
            problem = CalibrationService.build_problem(dataset, config.calibration_basis)
            weights = CalibrationService.solve_calibration(problem, config.calibration_tol, config.calibration_max_iter)
            q = PipelineService._density_ratio_weights(dataset, problem, weights)
            calibration = {
                "iterations": weights.iterations,
                "residual": weights.residual,
                "objective": weights.objective,
                **CalibrationService.balance_diagnostics(dataset, weights),
            }
            frame = CalibrationService.weights_frame(problem, weights, dataset.n_rpct)
            frame.insert(0, "group", group if group is not None else 1)
            weights_frames.append(frame)

            ec_resid, ec_params = PipelineService._own_fit_residuals(
                X[ec], Y[ec], config.outcome_basis, mu0[ec], fitted_on="ec"
            )
            ratio = NuisanceService.estimate_variance_ratio(
                (Y - mu0)[control], ec_resid, mu0_model.n_parameters, ec_params
            )
            models["r"] = {"value": ratio.value, "numerator": ratio.numerator, "denominator": ratio.denominator}
            if "acw" in config.estimators:
                report = EstimatorService.acw_estimate(EifInputs(mu0=mu0, q=q, r=ratio.value, **base), config.alpha)
                reports["acw"] = report.model_copy(update={"diagnostics": {"r": ratio.value}})

            for name in ("acw_alasso", "acw_alasso_gbm"):
                if name not in config.estimators:
                    continue
                if name == "acw_alasso":
                    mu0_ec_model = NuisanceService.fit_ols(X[ec], Y[ec], config.outcome_basis, fitted_on="ec")
                    models["mu0_ec"] = mu0_ec_model.summary()
                    mu0_v, mu0_ec_at_ec = mu0, mu0_ec_model.predict(X[ec])
                    name_ratio, control_params = ratio, mu0_model.n_parameters
                    refit = PipelineService._ec_refit(dataset, config, mu0)
                else:
                    mu0_v, mu0_ec_at_ec = PipelineService._boosted_controls(dataset, config, models)
                    # both residual sets are out-of-fold
                    name_ratio = NuisanceService.estimate_variance_ratio(
                        (Y - mu0_v)[control], Y[ec] - mu0_ec_at_ec
                    )
                    control_params, refit = 0, None
                report, summary, sel_frame = PipelineService._selective_borrowing(
                    name, dataset, config, base, q, weights, mu0_v, mu0_ec_at_ec, name_ratio, control_params, refit
                )
                reports[name] = report
                selections[name] = summary
                sel_frame.insert(0, "estimator", name)
                sel_frame.insert(0, "group", group if group is not None else 1)
                selection_frames.append(sel_frame)

        for name, report in reports.items():
            logger.info("%s %s: tau=%.4f se=%.4f borrowed=%d", label, name, report.tau_hat, report.std_error, report.n_borrowed)
        return PipelineResult(
            reports=reports,
            record_mask=np.ones(dataset.n, dtype=bool),
            selections=selections,
            selection_frames=selection_frames,
            weights_frames=weights_frames,
            calibration=calibration,
            models=models,
            group=group,
        )

    @staticmethod
    def _density_ratio_weights(
        dataset: TrialDataset, problem: CalibrationProblem, weights: CalibrationWeights
    ) -> np.ndarray:
        q = CalibrationService.evaluate(problem, weights, dataset.covariates)
        q[dataset.ec_mask] = weights.weights
        return dataset.n_rpct * q

    @staticmethod
    def _boosted_controls(dataset: TrialDataset, config: RunConfig, models: Dict) -> Tuple[np.ndarray, np.ndarray]:
        """Boosted mu0 (cross-fitted on RPCT controls) and cross-fitted boosted mu0_ec on the ECs."""
        X, Y = dataset.covariates, dataset.outcome
        control = dataset.rpct_mask & (dataset.treatment == 0)
        ec = dataset.ec_mask
        mu0_model = NuisanceService.fit_boosted_trees(X[control], Y[control], config.boosting)
        mu0_ec_model = NuisanceService.fit_boosted_trees(X[ec], Y[ec], config.boosting)
        models["mu0_gbm"] = mu0_model.summary()
        models["mu0_ec_gbm"] = mu0_ec_model.summary()
        mu0 = NuisanceService.predict_mu(mu0_model, X)
        mu0[control] = NuisanceService.predict_mu(mu0_model, X[control], mode="cross_fitted")
        return mu0, NuisanceService.predict_mu(mu0_ec_model, X[ec], mode="cross_fitted")

    @staticmethod
    def _own_fit_residuals(
        X: np.ndarray, y: np.ndarray, basis: BasisSpec, fallback: np.ndarray, fitted_on: str
    ) -> Tuple[np.ndarray, int]:
        """Residuals of y about its own linear fit and that fit's parameter count.

        With no more rows than parameters the residuals are taken about
        `fallback` predictions instead, with no parameters spent.
        """
        if y.shape[0] <= basis.dimension(X.shape[1]) + 1:
            return y - fallback, 0
        model = NuisanceService.fit_ols(X, y, basis, fitted_on=fitted_on)
        return y - model.predict(X), model.n_parameters

    @staticmethod
    def _ec_refit(dataset: TrialDataset, config: RunConfig, mu0: np.ndarray) -> Callable[[np.ndarray], BiasEstimates]:
        """Bias estimates for every EC from an EC outcome model trained on a subset of the ECs."""
        ec = dataset.ec_mask
        X_ec, Y_ec, mu0_ec = dataset.covariates[ec], dataset.outcome[ec], mu0[ec]

        def refit(train: np.ndarray) -> BiasEstimates:
            model = NuisanceService.fit_ols(X_ec[train], Y_ec[train], config.outcome_basis, fitted_on="ec_fold")
            return SelectionService.compute_bias_estimates(model.predict(X_ec), mu0_ec)

        return refit

    @staticmethod
    def _selective_borrowing(
        name: str,
        dataset: TrialDataset,
        config: RunConfig,
        base: Dict,
        q: np.ndarray,
        weights: CalibrationWeights,
        mu0: np.ndarray,
        mu0_ec_at_ec: np.ndarray,
        ratio: VarianceRatio,
        control_params: int,
        refit: Optional[Callable[[np.ndarray], BiasEstimates]],
    ):
        X, Y = dataset.covariates, dataset.outcome
        ec = dataset.ec_mask
        control = dataset.rpct_mask & (dataset.treatment == 0)
        eps0 = Y - mu0
        settings = config.selection
        cross_fitted = refit is None

        b_hat = SelectionService.compute_bias_estimates(
            mu0_ec_at_ec, mu0[ec], source="boosted" if cross_fitted else "linear", cross_fitted=cross_fitted
        )
        # noise scale from the trial controls only
        sigma2_control = NuisanceService.residual_variance(eps0[control], control_params)
        xi = SelectionService.compute_pseudo_observations(dataset, weights, mu0[ec], sigma2_control)
        selection = SelectionService.select(
            xi, b_hat, settings.fixed_grid(), settings.omega_grid, settings.folds, settings.seed,
            settings.grid_size, settings.min_ratio, refit,
        )
        chosen = selection.mask

        pi_b = np.ones(dataset.n)
        pi_b_status = "all_selected"
        r_b = 0.0
        if chosen.any():
            if cross_fitted:
                resid_b, params_b = (Y[ec] - mu0_ec_at_ec)[chosen], 0
            else:
                resid_b, params_b = PipelineService._own_fit_residuals(
                    X[ec][chosen], Y[ec][chosen], config.outcome_basis, mu0[ec][chosen], fitted_on=f"{name}_selected"
                )
            r_b = NuisanceService.estimate_variance_ratio(eps0[control], resid_b, control_params, params_b).value
            if not chosen.all():
                pi_model = NuisanceService.fit_logistic(X[ec], chosen.astype(float), fitted_on=f"{name}_selection")
                pi_b = pi_model.predict_proba(X)
                pi_b_status = pi_model.status

        inputs = EifInputs(mu0=mu0, q=q, r=ratio.value, pi_b=pi_b, r_b=r_b, **base)
        report = EstimatorService.acw_alasso_estimate(
            inputs, selection, config.alpha, name=name, sigma2_control=sigma2_control
        )
        summary = {**selection.summary(), "r_b": r_b, "pi_b_status": pi_b_status}
        report = report.model_copy(update={"diagnostics": {**report.diagnostics, **{
            k: v for k, v in summary.items() if k != "cv_path"
        }}})
        frame = SelectionService.selection_frame(
            [rid for rid, keep in zip(dataset.record_ids, ec) if keep], b_hat, xi, selection
        )
        return report, summary, frame
