import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import ConvergenceError, InfeasibleCalibrationError
from hybrid_control.models.calibration import CalibrationProblem, CalibrationWeights
from hybrid_control.models.dataset import TrialDataset
from hybrid_control.models.nuisance import BasisSpec

logger = logging.getLogger(__name__)

INFEASIBLE_HINT = "reduce the calibration basis or pre-match the external controls"


class CalibrationService:
    """Entropy-balancing weights for external controls via the Lagrangian dual"""

    @staticmethod
    def build_problem(dataset: TrialDataset, basis: Optional[BasisSpec] = None) -> CalibrationProblem:
        """EC basis rows and the RPCT sample mean of the same basis."""
        basis = basis or BasisSpec()
        X = dataset.covariates
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        g = basis.expand((X - center) / scale)
        ec = dataset.ec_mask
        return CalibrationProblem(
            ec_basis=g[ec],
            target_moments=g[dataset.rpct_mask].mean(axis=0),
            basis_spec=basis,
            center=center,
            scale=scale,
            ec_record_ids=tuple(r for r, keep in zip(dataset.record_ids, ec) if keep),
        )

    @staticmethod
    def solve_calibration(
        problem: CalibrationProblem,
        tol: float = Config.CALIBRATION_TOL,
        max_iter: int = Config.CALIBRATION_MAX_ITER,
    ) -> CalibrationWeights:
        """Damped Newton with Armijo backtracking on the convex dual

            f(eta) = log sum_i exp(eta . h_i) - eta . t

        where h, t are the EC-standardized basis rows and target. Stops once
        the moment residual max |sum_i q_i g_i - target| on the problem's own
        scale is within `tol`. A residual that stops improving for
        CALIBRATION_STALL_WINDOW steps is accepted when it is already within
        CALIBRATION_STALL_ACCEPT * tol of the target with a bounded dual, and
        reported as infeasible otherwise.
        """
        G = problem.ec_basis
        target = problem.target_moments
        center = G.mean(axis=0)
        scale = G.std(axis=0)

        constant = scale == 0
        gap = np.abs(target[constant] - center[constant])
        if gap.size and gap.max() > tol:
            raise InfeasibleCalibrationError(
                f"Target moment lies outside the range of a constant EC basis column; {INFEASIBLE_HINT}",
                {"max_gap": float(gap.max())},
            )
        active = ~constant
        H = (G[:, active] - center[active]) / scale[active]
        t = (target[active] - center[active]) / scale[active]

        def objective(eta: np.ndarray) -> float:
            return float(logsumexp(H @ eta) - eta @ t)

        def moment_residual(q: np.ndarray) -> float:
            if not active.any():
                return float(gap.max()) if gap.size else 0.0
            return float(np.max(np.abs((q @ H - t) * scale[active])))

        eta = np.zeros(H.shape[1])
        q = np.full(problem.n_ec, 1.0 / problem.n_ec)
        residual = moment_residual(q)
        best, best_eta, best_norm = residual, eta, 0.0
        stalled, iteration = 0, 0

        while residual > tol:
            iteration += 1
            if iteration > max_iter:
                raise ConvergenceError(
                    f"Calibration did not converge in {max_iter} iterations",
                    {"residual": residual, "dual_norm": float(np.linalg.norm(eta))},
                )
            mean = q @ H
            grad = mean - t
            hessian = (H * q[:, None]).T @ H - np.outer(mean, mean)
            step = -np.linalg.lstsq(hessian, grad, rcond=None)[0]

            current, slope, size = objective(eta), float(grad @ step), 1.0
            while objective(eta + size * step) > current + 1e-4 * size * slope and size > 1e-12:
                size /= 2
            eta = eta + size * step
            q = softmax(H @ eta)
            residual = moment_residual(q)

            norm = float(np.linalg.norm(eta))
            if residual < best:
                best, best_eta, best_norm, stalled = residual, eta, norm, 0
            else:
                stalled += 1
            if norm > Config.CALIBRATION_NORM_CAP:
                raise InfeasibleCalibrationError(
                    f"Calibration dual diverged (target on or outside the EC convex hull); {INFEASIBLE_HINT}",
                    {"dual_norm": norm, "residual": residual, "iterations": iteration},
                )
            if stalled >= Config.CALIBRATION_STALL_WINDOW:
                # a bounded dual stuck near the target is rounding, not infeasibility
                if best <= Config.CALIBRATION_STALL_ACCEPT * tol and norm <= 2.0 * best_norm + 1.0:
                    logger.warning(
                        "Calibration residual stalled at %.3g (tol %.3g); keeping the best iterate", best, tol
                    )
                    eta, residual = best_eta, best
                    break
                raise InfeasibleCalibrationError(
                    f"Calibration stalled away from the target (target on or outside the EC convex hull); {INFEASIBLE_HINT}",
                    {"dual_norm": norm, "residual": best, "iterations": iteration},
                )

        dual = np.zeros(problem.dimension)
        dual[active] = eta / scale[active]
        scores = G @ dual
        log_normalizer = float(logsumexp(scores))
        weights = np.exp(scores - log_normalizer)
        weights = weights / weights.sum()
        dual_residual = float(np.linalg.norm(weights @ G - target))

        logger.info(
            "Calibration converged in %d iterations (residual %.3g, ESS %.1f of %d)",
            iteration, residual, 1.0 / np.sum(weights ** 2), problem.n_ec,
        )
        return CalibrationWeights(
            weights=weights,
            dual=dual,
            residual=float(np.max(np.abs(weights @ G - target))),
            objective=float(np.sum(weights * np.log(weights))),
            log_normalizer=log_normalizer,
            iterations=iteration,
            dual_residual=dual_residual,
        )

    @staticmethod
    def density_ratio_scale(weights: CalibrationWeights, n_rpct: int) -> np.ndarray:
        """q on the density-ratio scale: N_R * q, summing to N_R over the ECs."""
        return n_rpct * weights.weights

    @staticmethod
    def evaluate(problem: CalibrationProblem, weights: CalibrationWeights, X: np.ndarray) -> np.ndarray:
        """Normalized-scale weight function exp(dual . g(x) - log_normalizer) at arbitrary records."""
        return np.exp(problem.basis_values(X) @ weights.dual - weights.log_normalizer)

    @staticmethod
    def balance_diagnostics(dataset: TrialDataset, weights: CalibrationWeights) -> Dict[str, object]:
        """Standardized mean differences RPCT vs EC, before and after weighting."""
        X_r = dataset.covariates[dataset.rpct_mask]
        X_e = dataset.covariates[dataset.ec_mask]
        pooled_sd = np.sqrt((X_r.var(axis=0) + X_e.var(axis=0)) / 2)
        pooled_sd[pooled_sd == 0] = 1.0
        before = (X_r.mean(axis=0) - X_e.mean(axis=0)) / pooled_sd
        after = (X_r.mean(axis=0) - weights.weights @ X_e) / pooled_sd
        return {
            "effective_sample_size": weights.effective_sample_size,
            "smd_before": dict(zip(dataset.covariate_names, before.tolist())),
            "smd_after": dict(zip(dataset.covariate_names, after.tolist())),
        }

    @staticmethod
    def weights_frame(problem: CalibrationProblem, weights: CalibrationWeights, n_rpct: int) -> pd.DataFrame:
        return pd.DataFrame({
            "record_id": list(problem.ec_record_ids) or list(range(problem.n_ec)),
            "weight": weights.weights,
            "density_ratio_weight": CalibrationService.density_ratio_scale(weights, n_rpct),
        })

    @staticmethod
    def write_weights(frames: List[pd.DataFrame], path: Union[str, Path]) -> None:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
