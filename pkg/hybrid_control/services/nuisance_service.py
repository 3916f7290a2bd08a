import logging
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit
from sklearn.ensemble import GradientBoostingRegressor

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import (
    ConvergenceError,
    EstimationError,
    RankDeficientError,
    ZeroDenominatorError,
)
from hybrid_control.models.nuisance import (
    BasisSpec,
    BoostedTreesModel,
    BoostingConfig,
    LinearModel,
    LogisticModel,
    VarianceRatio,
)

logger = logging.getLogger(__name__)


class NuisanceService:
    """Outcome regressions, logistic scores, boosted trees and variance ratios"""

    @staticmethod
    def fit_ols(
        X: np.ndarray,
        y: np.ndarray,
        basis: Optional[BasisSpec] = None,
        ridge: bool = True,
        fitted_on: str = "",
    ) -> LinearModel:
        """Least squares on [1, basis(X)].

        A rank-deficient design falls back to a ridge fit (penalty
        Config.RIDGE_PENALTY on the standardized design) when `ridge` is set.
        """
        basis = basis or BasisSpec()
        Z = basis.expand(X)
        y = np.asarray(y, dtype=float)
        if Z.shape[0] != y.shape[0]:
            raise ValueError(f"design has {Z.shape[0]} rows, response has {y.shape[0]}")

        design = np.column_stack([np.ones(Z.shape[0]), Z])
        full_rank = design.shape[0] >= design.shape[1] and np.linalg.matrix_rank(design) == design.shape[1]
        if full_rank:
            coef, *_ = np.linalg.lstsq(design, y, rcond=None)
            return LinearModel(basis=basis, coefficients=coef, fitted_on=fitted_on)

        if not ridge:
            raise RankDeficientError(
                "Design matrix is rank deficient",
                {"rows": design.shape[0], "columns": design.shape[1], "rank": int(np.linalg.matrix_rank(design))},
            )

        logger.info("Rank-deficient design (%d x %d) on %s: using ridge fallback", *design.shape, fitted_on or "sample")
        center = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale[scale == 0] = 1.0
        Zs = (Z - center) / scale
        y_mean = float(y.mean())
        gram = Zs.T @ Zs + Config.RIDGE_PENALTY * np.eye(Zs.shape[1])
        slopes = np.linalg.solve(gram, Zs.T @ (y - y_mean)) / scale
        coef = np.concatenate([[y_mean - center @ slopes], slopes])
        return LinearModel(basis=basis, coefficients=coef, fitted_on=fitted_on, ridge=True)

    @staticmethod
    def fit_logistic(
        X: np.ndarray,
        y: np.ndarray,
        tol: float = Config.LOGISTIC_TOL,
        max_iter: int = Config.LOGISTIC_MAX_ITER,
        cap: float = Config.SEPARATION_CAP,
        fitted_on: str = "",
    ) -> LogisticModel:
        """Newton-Raphson maximum likelihood on standardized covariates.

        Zero-variance columns get a zero coefficient. If the slope norm on
        the standardized scale passes `cap` the fit is scaled back onto the
        cap and returned with status "separation".
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        if n != y.shape[0]:
            raise ValueError(f"design has {n} rows, response has {y.shape[0]}")
        if not (np.any(y == 1) and np.any(y == 0)):
            raise EstimationError("Logistic regression needs both classes present", {"n": n, "positives": int(y.sum())})

        center = X.mean(axis=0)
        scale = X.std(axis=0)
        active = scale > 0
        Xs = (X[:, active] - center[active]) / scale[active]
        design = np.column_stack([np.ones(n), Xs])
        original = np.column_stack([np.ones(n), X])

        def to_original(beta: np.ndarray) -> np.ndarray:
            slopes = np.zeros(p)
            slopes[active] = beta[1:] / scale[active]
            return np.concatenate([[beta[0] - center @ slopes], slopes])

        def loglik(beta: np.ndarray) -> float:
            eta = design @ beta
            return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))

        def score_norm(beta: np.ndarray) -> float:
            p_hat = expit(original @ to_original(beta))
            return float(np.linalg.norm(original.T @ (y - p_hat)))

        mean_y = float(y.mean())
        beta = np.zeros(design.shape[1])
        beta[0] = np.log(mean_y / (1 - mean_y))
        current = loglik(beta)

        for iteration in range(1, max_iter + 1):
            p_hat = expit(design @ beta)
            grad = design.T @ (y - p_hat)
            hessian = (design * (p_hat * (1 - p_hat))[:, None]).T @ design
            step, *_ = np.linalg.lstsq(hessian, grad, rcond=None)

            t = 1.0
            candidate = beta + step
            value = loglik(candidate)
            # loglik changes below rounding near the optimum must not block a Newton step
            while value < current - 1e-12 * (1.0 + abs(current)) and t > 1e-10:
                t /= 2
                candidate = beta + t * step
                value = loglik(candidate)
            beta, current = candidate, max(value, current)

            slope_norm = float(np.linalg.norm(beta[1:]))
            if slope_norm > cap:
                beta[1:] *= cap / slope_norm
                logger.warning(
                    "Logistic fit on %s: separation detected (slope norm %.3g > %.3g), returning capped fit",
                    fitted_on or "sample", slope_norm, cap,
                )
                return LogisticModel(
                    coefficients=to_original(beta),
                    iterations=iteration,
                    gradient_norm=score_norm(beta),
                    status="separation",
                    fitted_on=fitted_on,
                )

            gradient_norm = score_norm(beta)
            if gradient_norm <= tol:
                logger.debug("Logistic fit on %s converged in %d iterations", fitted_on or "sample", iteration)
                return LogisticModel(
                    coefficients=to_original(beta),
                    iterations=iteration,
                    gradient_norm=gradient_norm,
                    fitted_on=fitted_on,
                )

        raise ConvergenceError(
            f"Logistic regression did not converge in {max_iter} iterations",
            {"gradient_norm": score_norm(beta), "fitted_on": fitted_on},
        )

    @staticmethod
    def assign_folds(n: int, folds: int, seed: int) -> np.ndarray:
        """Balanced fold ids 0..folds-1 in a seeded random order."""
        order = np.random.default_rng(seed).permutation(n)
        assignment = np.empty(n, dtype=int)
        assignment[order] = np.arange(n) % folds
        return assignment

    @staticmethod
    def fit_boosted_trees(X: np.ndarray, y: np.ndarray, config: Optional[BoostingConfig] = None) -> BoostedTreesModel:
        """Squared-error boosting tuned over (depth, n_trees) by fold-held-out MSE.

        The selected configuration is refit on all rows and on every
        leave-one-fold-out training set; the latter give the cross-fitted
        predictions.
        """
        config = config or BoostingConfig()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(y, dtype=float)
        n = X.shape[0]
        if n < 2 * config.folds:
            raise EstimationError(
                f"Boosting with {config.folds}-fold cross-fitting needs at least {2 * config.folds} rows",
                {"rows": n},
            )

        fold_assignment = NuisanceService.assign_folds(n, config.folds, config.seed)
        intercept = float(y.mean())
        if np.all(y == y[0]) or max(config.n_trees) == 0:
            logger.info("Boosting on constant response: single-leaf model")
            return BoostedTreesModel(
                estimator=None, intercept=intercept, shrinkage=config.shrinkage, n_trees=0,
                max_depth=0, fold_assignment=fold_assignment,
            )

        depth, n_trees, scores = NuisanceService._tune_boosting(X, y, fold_assignment, config)
        if n_trees == 0:
            return BoostedTreesModel(
                estimator=None, intercept=intercept, shrinkage=config.shrinkage, n_trees=0,
                max_depth=depth, fold_assignment=fold_assignment, cv_scores=scores,
            )

        def make() -> GradientBoostingRegressor:
            return GradientBoostingRegressor(
                loss="squared_error", learning_rate=config.shrinkage, n_estimators=n_trees,
                max_depth=depth, subsample=1.0, random_state=config.seed,
            )

        estimator = make().fit(X, y)
        fold_models = tuple(
            make().fit(X[fold_assignment != k], y[fold_assignment != k]) for k in range(config.folds)
        )
        logger.info("Boosting tuned: depth=%d, n_trees=%d, cv_mse=%.4g", depth, n_trees, scores[f"{depth}:{n_trees}"])
        return BoostedTreesModel(
            estimator=estimator, intercept=intercept, shrinkage=config.shrinkage, n_trees=n_trees,
            max_depth=depth, fold_assignment=fold_assignment, fold_models=fold_models, cv_scores=scores,
        )

    @staticmethod
    def _tune_boosting(
        X: np.ndarray, y: np.ndarray, folds: np.ndarray, config: BoostingConfig
    ) -> Tuple[int, int, Dict[str, float]]:
        max_trees = max(config.n_trees)
        scores: Dict[str, float] = {}
        best: Optional[Tuple[float, int, int]] = None
        for depth in config.depths:
            sse = np.zeros(max_trees + 1)
            for k in range(config.folds):
                train, held = folds != k, folds == k
                model = GradientBoostingRegressor(
                    loss="squared_error", learning_rate=config.shrinkage, n_estimators=max_trees,
                    max_depth=depth, subsample=1.0, random_state=config.seed,
                ).fit(X[train], y[train])
                sse[0] += np.sum((y[held] - y[train].mean()) ** 2)
                for m, pred in enumerate(model.staged_predict(X[held]), start=1):
                    sse[m] += np.sum((y[held] - pred) ** 2)
            for n_trees in config.n_trees:
                mse = float(sse[n_trees] / len(y))
                scores[f"{depth}:{n_trees}"] = mse
                # strict comparison keeps the shallowest, smallest ensemble among ties
                if best is None or mse < best[0]:
                    best = (mse, depth, n_trees)
        return best[1], best[2], scores

    @staticmethod
    def residual_variance(residuals: np.ndarray, n_parameters: int = 0) -> float:
        """sum(e^2) / (n - n_parameters); the plain mean square when too few rows remain."""
        residuals = np.asarray(residuals, dtype=float)
        if residuals.size == 0:
            raise ValueError("residual variance needs a nonempty residual vector")
        dof = residuals.size - n_parameters if residuals.size > n_parameters else residuals.size
        return float(residuals @ residuals / dof)

    @staticmethod
    def estimate_variance_ratio(
        resid_rpct_controls: np.ndarray,
        resid_ec: np.ndarray,
        params_rpct: int = 0,
        params_ec: int = 0,
    ) -> VarianceRatio:
        """r = mean(RPCT control residual^2) / mean(EC residual^2).

        `params_*` are the parameter counts of the fits the residuals come
        from; each mean square then divides by its residual degrees of freedom.
        """
        resid_rpct_controls = np.asarray(resid_rpct_controls, dtype=float)
        resid_ec = np.asarray(resid_ec, dtype=float)
        if resid_rpct_controls.size == 0 or resid_ec.size == 0:
            raise ValueError("variance ratio needs nonempty residual vectors")
        numerator = NuisanceService.residual_variance(resid_rpct_controls, params_rpct)
        denominator = NuisanceService.residual_variance(resid_ec, params_ec)
        if denominator == 0:
            raise ZeroDenominatorError(
                "EC residuals are all zero; the variance ratio is undefined",
                {"numerator": numerator, "n_ec": int(resid_ec.size)},
            )
        return VarianceRatio(value=numerator / denominator, numerator=numerator, denominator=denominator)

    @staticmethod
    def predict_mu(model, X: np.ndarray, mode: str = "in_sample") -> np.ndarray:
        """Predictions from any fitted outcome model.

        mode "cross_fitted" is only defined for boosted trees, on exactly the
        rows the model was trained on.
        """
        if mode not in ("in_sample", "cross_fitted"):
            raise ValueError(f"unknown prediction mode '{mode}'")
        if mode == "cross_fitted":
            if not isinstance(model, BoostedTreesModel):
                raise ValueError("cross-fitted prediction requires a model with a fold assignment")
            return model.predict_cross_fitted(X)
        return model.predict(X)
