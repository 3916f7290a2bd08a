import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import EstimationError
from hybrid_control.models.calibration import CalibrationWeights
from hybrid_control.models.dataset import TrialDataset
from hybrid_control.models.selection import BiasEstimates, BiasSelection, PseudoObservations

logger = logging.getLogger(__name__)


class SelectionService:
    """Bias detection for external controls by adaptive-lasso selective borrowing"""

    @staticmethod
    def compute_bias_estimates(
        mu0_ec_preds: np.ndarray,
        mu0_preds: np.ndarray,
        source: str = "linear",
        cross_fitted: bool = False,
    ) -> BiasEstimates:
        mu0_ec_preds = np.asarray(mu0_ec_preds, dtype=float)
        mu0_preds = np.asarray(mu0_preds, dtype=float)
        if mu0_ec_preds.shape != mu0_preds.shape:
            raise ValueError("bias estimates need prediction vectors of equal length")
        return BiasEstimates(b_hat=mu0_ec_preds - mu0_preds, source=source, cross_fitted=cross_fitted)

    @staticmethod
    def compute_pseudo_observations(
        dataset: TrialDataset,
        weights: CalibrationWeights,
        mu0_preds: np.ndarray,
        residual_variance: float,
    ) -> PseudoObservations:
        """xi_i = (N / N_R) q_i (Y_i - mu0(X_i)) on the EC records, q normalized.

        `mu0_preds` are RPCT control-model predictions at the EC records and
        `residual_variance` the RPCT control residual variance; the
        diagonal variance is [(N / N_R) q_i]^2 * residual_variance.
        """
        ec = dataset.ec_mask
        mu0_preds = np.asarray(mu0_preds, dtype=float)
        if weights.weights.shape[0] != int(ec.sum()) or mu0_preds.shape[0] != int(ec.sum()):
            raise ValueError("weights and predictions must cover every EC record")
        factor = dataset.n / dataset.n_rpct * weights.weights
        xi = factor * (dataset.outcome[ec] - mu0_preds)
        return PseudoObservations(xi_hat=xi, sigma2=factor ** 2 * residual_variance)

    @staticmethod
    def thresholds(xi: PseudoObservations, b_hat: BiasEstimates, lam: float, omega: float) -> np.ndarray:
        penalty = np.maximum(np.abs(b_hat.b_hat), Config.BHAT_FLOOR) ** omega
        return lam * xi.sigma2 / (2 * penalty)

    @staticmethod
    def adaptive_lasso_solve(
        xi: PseudoObservations, b_hat: BiasEstimates, lam: float, omega: float
    ) -> BiasSelection:
        """Coordinatewise soft-thresholding for the diagonal penalized problem

            sum_i (xi_i - b_i)^2 / sigma2_i + lam * sum_i |b_i| / |b_hat_i|^omega
        """
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        if omega <= 0:
            raise ValueError("omega must be positive")
        if xi.xi_hat.shape != b_hat.b_hat.shape:
            raise ValueError("pseudo-observations and bias estimates differ in length")
        if np.any(xi.sigma2 <= 0):
            raise EstimationError(
                "Pseudo-observation variances must be positive",
                {"nonpositive": int(np.sum(xi.sigma2 <= 0))},
            )
        threshold = SelectionService.thresholds(xi, b_hat, lam, omega)
        b_tilde = np.sign(xi.xi_hat) * np.maximum(0.0, np.abs(xi.xi_hat) - threshold)
        selected = tuple(int(i) for i in np.flatnonzero(b_tilde == 0))
        return BiasSelection(b_tilde=b_tilde, selected=selected, lam=float(lam), omega=float(omega))

    @staticmethod
    def lambda_max(xi: PseudoObservations, b_hat: BiasEstimates, omega: float) -> float:
        """Smallest lambda that zeroes every coordinate."""
        penalty = np.maximum(np.abs(b_hat.b_hat), Config.BHAT_FLOOR) ** omega
        value = float(np.max(2 * np.abs(xi.xi_hat) * penalty / xi.sigma2)) if xi.xi_hat.size else 0.0
        # relative slack keeps every coordinate at zero under rounding
        value *= 1.0 + 1e-10
        return value if value > 0 else 1.0

    @staticmethod
    def lambda_grid(
        xi: PseudoObservations,
        b_hat: BiasEstimates,
        omega: float,
        size: int = Config.LAMBDA_GRID_SIZE,
        min_ratio: float = Config.LAMBDA_MIN_RATIO,
    ) -> np.ndarray:
        top = SelectionService.lambda_max(xi, b_hat, omega)
        if size == 1:
            return np.array([top])
        return np.geomspace(min_ratio * top, top, size)

    @staticmethod
    def selection_risk(xi: PseudoObservations, selected: np.ndarray) -> np.ndarray:
        """Per-coordinate unbiased risk of the selective estimate, in standardized units.

        A selected coordinate estimates its bias as zero (risk z^2 - 1), a
        rejected one keeps xi (risk 1); the expected optimum threshold is
        sqrt(2) standard deviations.
        """
        z2 = xi.xi_hat ** 2 / xi.sigma2
        return np.where(selected, z2 - 1.0, 1.0)

    @staticmethod
    def cross_validate_tuning(
        xi: PseudoObservations,
        b_hat: BiasEstimates,
        lambda_grid: Optional[Sequence[float]] = None,
        omega_grid: Sequence[float] = Config.OMEGA_GRID,
        folds: int = Config.CV_FOLDS,
        seed: int = 0,
        grid_size: int = Config.LAMBDA_GRID_SIZE,
        min_ratio: float = Config.LAMBDA_MIN_RATIO,
        refit: Optional[Callable[[np.ndarray], BiasEstimates]] = None,
    ) -> Tuple[float, float, List[Dict[str, float]]]:
        """K-fold choice of (lambda, omega) over EC indices.

        `refit(train_mask)` returns bias estimates for every EC from nuisance
        models trained on the ECs in `train_mask` only, so each held-out fold
        is thresholded with out-of-fold penalty weights and scored by the mean
        `selection_risk` of its coordinates. Without `refit` the given b_hat
        is used for every fold (it should then already be cross-fitted). The
        path reports the mean and standard error across folds. Ties go to the
        larger lambda, then the earlier omega. Without `lambda_grid` each
        omega gets a log-spaced grid below its own full-data lambda_max.
        """
        n = xi.xi_hat.shape[0]
        if not len(omega_grid) or (lambda_grid is not None and not len(lambda_grid)):
            raise ValueError("tuning grids must be nonempty")
        if folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if n < folds:
            raise ValueError(f"cross-validation with {folds} folds needs at least {folds} external controls")

        grids = {
            omega: np.sort(np.asarray(lambda_grid, dtype=float)) if lambda_grid is not None
            else SelectionService.lambda_grid(xi, b_hat, omega, grid_size, min_ratio)
            for omega in omega_grid
        }

        if np.all(xi.xi_hat == xi.xi_hat[0]):
            omega = float(omega_grid[0])
            largest = float(grids[omega_grid[0]][-1])
            logger.warning("All pseudo-observations are identical; choosing the largest lambda %.4g", largest)
            return largest, omega, []

        assignment = np.empty(n, dtype=int)
        assignment[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds
        fold_bias = [refit(assignment != k) if refit is not None else b_hat for k in range(folds)]
        for k, estimates in enumerate(fold_bias):
            if estimates.b_hat.shape != b_hat.b_hat.shape:
                raise ValueError(f"refit for fold {k} returned {estimates.b_hat.shape[0]} bias estimates, expected {n}")

        path: List[Dict[str, float]] = []
        for omega in omega_grid:
            for lam in grids[omega]:
                fold_scores = np.empty(folds)
                for k in range(folds):
                    held = assignment == k
                    threshold = SelectionService.thresholds(xi, fold_bias[k], lam, omega)
                    selected = np.abs(xi.xi_hat) <= threshold
                    fold_scores[k] = SelectionService.selection_risk(xi, selected)[held].mean()
                path.append({
                    "omega": float(omega),
                    "lambda": float(lam),
                    "score": float(fold_scores.mean()),
                    "se": float(fold_scores.std(ddof=1) / np.sqrt(folds)),
                })

        best_score = min(p["score"] for p in path)
        tied = [p for p in path if p["score"] <= best_score + 1e-12 * max(1.0, abs(best_score))]
        choice = max(tied, key=lambda p: (p["lambda"], -list(omega_grid).index(p["omega"])))
        logger.info("Selection tuning: lambda=%.4g omega=%g cv=%.4g", choice["lambda"], choice["omega"], choice["score"])
        return choice["lambda"], choice["omega"], path

    @staticmethod
    def select(
        xi: PseudoObservations,
        b_hat: BiasEstimates,
        lambda_grid: Optional[Sequence[float]] = None,
        omega_grid: Sequence[float] = Config.OMEGA_GRID,
        folds: int = Config.CV_FOLDS,
        seed: int = 0,
        grid_size: int = Config.LAMBDA_GRID_SIZE,
        min_ratio: float = Config.LAMBDA_MIN_RATIO,
        refit: Optional[Callable[[np.ndarray], BiasEstimates]] = None,
    ) -> BiasSelection:
        """Tune by cross-validation, then solve at the chosen (lambda, omega) with the full-data b_hat."""
        folds = min(folds, xi.xi_hat.shape[0])
        if folds < 2:
            # a single EC: no held-out fold to score, threshold at the top of the grid
            omega = float(omega_grid[0])
            if lambda_grid is not None and len(lambda_grid):
                lam = float(np.max(lambda_grid))
            else:
                lam = SelectionService.lambda_max(xi, b_hat, omega)
            return SelectionService.adaptive_lasso_solve(xi, b_hat, lam, omega)
        lam, omega, path = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid, omega_grid, folds, seed, grid_size, min_ratio, refit
        )
        solution = SelectionService.adaptive_lasso_solve(xi, b_hat, lam, omega)
        return BiasSelection(
            b_tilde=solution.b_tilde, selected=solution.selected, lam=lam, omega=omega, cv_path=path
        )

    @staticmethod
    def selection_frame(
        record_ids: Sequence[str], b_hat: BiasEstimates, xi: PseudoObservations, selection: BiasSelection
    ) -> pd.DataFrame:
        return pd.DataFrame({
            "ec_record_id": list(record_ids),
            "b_hat": b_hat.b_hat,
            "xi_hat": xi.xi_hat,
            "b_tilde": selection.b_tilde,
            "selected": selection.mask.astype(int),
        })

    @staticmethod
    def write_selection(frames: List[pd.DataFrame], path: Union[str, Path]) -> None:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
