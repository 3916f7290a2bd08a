import logging
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import EstimationError
from hybrid_control.models.estimate import EifInputs, EstimateReport, HypothesisDecision
from hybrid_control.models.selection import BiasSelection

logger = logging.getLogger(__name__)


class EstimatorService:
    """RPCT-only AIPW, calibration-weighted ACW and selective-borrowing ACW with EIF inference"""

    @staticmethod
    def aipw_estimate(
        inputs: EifInputs, alpha: float = Config.ALPHA, name: str = "aipw"
    ) -> EstimateReport:
        """Trial-only augmented IPW; identical to ACW with r = 0."""
        rpct = inputs.in_rpct
        treated = rpct & (inputs.treatment == 1)
        control = rpct & (inputs.treatment == 0)
        if not treated.any() or not control.any():
            raise EstimationError("AIPW needs both RPCT arms", {"treated": int(treated.sum()), "control": int(control.sum())})
        weights = np.where(control, 1.0 / (1.0 - inputs.propensity), 0.0)
        return EstimatorService._report(name, inputs, weights, alpha, n_borrowed=0)

    @staticmethod
    def acw_estimate(inputs: EifInputs, alpha: float = Config.ALPHA, name: str = "acw") -> EstimateReport:
        """Calibration-weighted augmentation borrowing every EC, q on the density-ratio scale."""
        rpct = inputs.in_rpct
        control = rpct & (inputs.treatment == 0)
        numerator = (control + (~rpct) * inputs.r) * inputs.q
        denominator = inputs.q * (1.0 - inputs.propensity) + inputs.r
        weights = EstimatorService._guarded_ratio(numerator, denominator, "acw")
        n_borrowed = int((~rpct).sum()) if inputs.r > 0 else 0
        return EstimatorService._report(name, inputs, weights, alpha, n_borrowed=n_borrowed)

    @staticmethod
    def acw_alasso_estimate(
        inputs: EifInputs,
        selection: Optional[BiasSelection] = None,
        alpha: float = Config.ALPHA,
        name: str = "acw_alasso",
        sigma2_control: Optional[float] = None,
    ) -> EstimateReport:
        """Selective-borrowing ACW: only ECs with an exact-zero penalized bias enter the numerator.

        `selection` indexes EC records in dataset order; without it the
        selection carried by `inputs` is used. An empty selection falls back
        to the RPCT-only estimator.
        """
        rpct = inputs.in_rpct
        selected = inputs.selected.copy()
        if selection is not None:
            if selection.b_tilde.shape[0] != int((~rpct).sum()):
                raise ValueError("selection does not cover the EC records of the inputs")
            selected[~rpct] = selection.mask

        if not selected.any():
            logger.info("%s: no comparable external controls selected, using the RPCT-only estimator", name)
            report = EstimatorService.aipw_estimate(inputs, alpha, name=name)
            return report.model_copy(update={
                "efficiency_gain": 0.0,
                "diagnostics": {**report.diagnostics, "bypass": True},
            })

        control = rpct & (inputs.treatment == 0)
        numerator = (control + selected * inputs.r_b) * inputs.q
        denominator = inputs.q * (1.0 - inputs.propensity) + inputs.pi_b * inputs.r_b
        weights = EstimatorService._guarded_ratio(numerator, denominator, name)
        gain = None
        if sigma2_control is not None:
            gain = EstimatorService.efficiency_gain(inputs, sigma2_control)
        return EstimatorService._report(
            name, inputs, weights, alpha, n_borrowed=int(selected.sum()), efficiency_gain=gain
        )

    @staticmethod
    def eif_variance(influence_values: np.ndarray, n: int) -> float:
        """N^-1 sum psi_i^2; the report variance is this divided by N."""
        influence_values = np.asarray(influence_values, dtype=float)
        return float(influence_values @ influence_values / n)

    @staticmethod
    def confidence_interval(tau_hat: float, variance: float, alpha: float = Config.ALPHA) -> Tuple[float, float]:
        """Wald interval; `variance` is already on the V/N scale."""
        if variance < 0:
            raise ValueError("variance must be nonnegative")
        if not 0 < alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        half = float(norm.ppf(1.0 - alpha / 2.0)) * float(np.sqrt(variance))
        return tau_hat - half, tau_hat + half

    @staticmethod
    def hypothesis_test(
        report: EstimateReport,
        null_value: float = 0.0,
        side: str = "two-sided",
        alpha: Optional[float] = None,
    ) -> HypothesisDecision:
        """Wald test of tau = null_value; `side` names the alternative."""
        alpha = report.alpha if alpha is None else alpha
        se = float(np.sqrt(report.variance))
        diff = report.tau_hat - null_value
        if se == 0:
            if diff == 0:
                raise EstimationError(
                    "Test statistic undefined: zero variance and estimate equal to the null value",
                    {"estimator": report.estimator, "null_value": null_value},
                )
            z = float(np.copysign(np.inf, diff))
        else:
            z = diff / se

        if side == "two-sided":
            p_value = float(2.0 * norm.sf(abs(z)))
        elif side == "greater":
            p_value = float(norm.sf(z))
        elif side == "less":
            p_value = float(norm.cdf(z))
        else:
            raise ValueError(f"unknown alternative '{side}'")
        return HypothesisDecision(
            estimator=report.estimator, null_value=null_value, side=side, alpha=alpha,
            statistic=z, p_value=p_value, reject=p_value < alpha,
        )

    @staticmethod
    def efficiency_gain(inputs: EifInputs, sigma2_control: float) -> float:
        """Plug-in asymptotic variance reduction over the RPCT-only estimator.

        (N / N_R)^2 * mean_i[ P(R=1|X_i) r_b pi_b(X_i) / (q_i (1 - pi_A) + pi_b(X_i) r_b) ] * sigma2_control
        with P(R=1|X) = q / (1 + q) on the density-ratio scale.
        """
        if sigma2_control <= 0 or inputs.r_b <= 0:
            return 0.0
        q = inputs.q
        denominator = q * (1.0 - inputs.propensity) + inputs.pi_b * inputs.r_b
        share = q / (1.0 + q) * inputs.r_b * inputs.pi_b
        terms = np.divide(share, denominator, out=np.zeros_like(share), where=denominator > 0)
        scale = (inputs.n / inputs.n_rpct) ** 2
        return float(max(0.0, scale * terms.mean() * sigma2_control))

    @staticmethod
    def influence_values(inputs: EifInputs, weights: np.ndarray, tau_hat: float) -> np.ndarray:
        rpct = inputs.in_rpct
        treated = inputs.treatment == 1
        trial_term = np.where(
            rpct,
            inputs.mu1 - inputs.mu0 - tau_hat + np.where(treated, inputs.eps1 / inputs.propensity, 0.0),
            0.0,
        )
        return inputs.n / inputs.n_rpct * (trial_term - weights * inputs.eps0)

    @staticmethod
    def _guarded_ratio(numerator: np.ndarray, denominator: np.ndarray, name: str) -> np.ndarray:
        contributing = numerator != 0
        small = contributing & (np.abs(denominator) < Config.DENOMINATOR_GUARD)
        if small.any():
            raise EstimationError(
                f"{name}: augmentation denominator below {Config.DENOMINATOR_GUARD} (positivity failure)",
                {"records": np.flatnonzero(small)[:20].tolist()},
            )
        return np.divide(numerator, denominator, out=np.zeros_like(numerator, dtype=float), where=contributing)

    @staticmethod
    def _report(
        name: str,
        inputs: EifInputs,
        weights: np.ndarray,
        alpha: float,
        n_borrowed: int,
        efficiency_gain: Optional[float] = None,
    ) -> EstimateReport:
        rpct = inputs.in_rpct
        treated = inputs.treatment == 1
        n_rpct = inputs.n_rpct
        trial = inputs.mu1 - inputs.mu0 + np.where(treated, inputs.eps1 / inputs.propensity, 0.0)
        tau_hat = float(np.sum(trial[rpct]) / n_rpct - np.sum(weights * inputs.eps0) / n_rpct)

        influence = EstimatorService.influence_values(inputs, weights, tau_hat)
        variance = EstimatorService.eif_variance(influence, inputs.n) / inputs.n
        low, high = EstimatorService.confidence_interval(tau_hat, variance, alpha)
        return EstimateReport(
            estimator=name,
            tau_hat=tau_hat,
            variance=variance,
            std_error=float(np.sqrt(variance)),
            ci_low=low,
            ci_high=high,
            alpha=alpha,
            n_borrowed=n_borrowed,
            efficiency_gain=efficiency_gain,
            influence_values=influence,
        )
