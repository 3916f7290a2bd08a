import logging

import numpy as np
import numpy.testing as npt
import pytest
from scipy.optimize import minimize_scalar

from hybrid_control.core.config import Config
from hybrid_control.core.exceptions import EstimationError
from hybrid_control.models.selection import BiasEstimates, PseudoObservations, SelectionConfig
from hybrid_control.services.selection_service import SelectionService


def pseudo(xi, sigma2=1.0):
    xi = np.asarray(xi, dtype=float)
    return PseudoObservations(xi_hat=xi, sigma2=np.broadcast_to(float(sigma2), xi.shape).copy())


def bias(b_hat):
    return BiasEstimates(b_hat=np.asarray(b_hat, dtype=float))


class TestAdaptiveLasso:

    def test_soft_threshold_example(self):
        selection = SelectionService.adaptive_lasso_solve(pseudo([2.0]), bias([1.0]), lam=2.0, omega=1.0)
        npt.assert_allclose(selection.b_tilde, [1.0])
        assert selection.selected == ()

    def test_zero_coordinates_are_selected(self):
        selection = SelectionService.adaptive_lasso_solve(
            pseudo([0.1, -3.0, 0.4]), bias([0.1, -3.0, 0.4]), lam=1.0, omega=1.0
        )
        assert selection.selected == (0, 2)
        npt.assert_array_equal(selection.mask, [True, False, True])
        assert selection.b_tilde[1] < 0

    def test_lambda_zero_keeps_every_pseudo_observation(self):
        xi = [0.5, -1.0, 2.0]
        selection = SelectionService.adaptive_lasso_solve(pseudo(xi), bias(xi), lam=0.0, omega=2.0)
        npt.assert_allclose(selection.b_tilde, xi)

    def test_lambda_max_selects_everything(self):
        xi, b_hat = pseudo([0.5, -1.0, 2.0], 0.5), bias([0.3, -1.2, 1.9])
        top = SelectionService.lambda_max(xi, b_hat, 1.0)
        assert SelectionService.adaptive_lasso_solve(xi, b_hat, top, 1.0).n_selected == 3
        assert SelectionService.adaptive_lasso_solve(xi, b_hat, 0.9 * top, 1.0).n_selected < 3

    def test_tiny_initial_estimate_is_floored(self):
        selection = SelectionService.adaptive_lasso_solve(pseudo([5.0]), bias([0.0]), lam=1.0, omega=1.0)
        assert selection.selected == (0,)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            SelectionService.adaptive_lasso_solve(pseudo([1.0]), bias([1.0]), lam=-1.0, omega=1.0)
        with pytest.raises(ValueError):
            SelectionService.adaptive_lasso_solve(pseudo([1.0]), bias([1.0]), lam=1.0, omega=0.0)
        with pytest.raises(EstimationError):
            SelectionService.adaptive_lasso_solve(pseudo([1.0], 0.0), bias([1.0]), lam=1.0, omega=1.0)

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(21)
        n = 1000
        xi_values = rng.normal(scale=3.0, size=n)
        sigma2 = rng.uniform(0.2, 4.0, n)
        b_hat_values = rng.normal(scale=2.0, size=n)
        lam, omega = 1.7, 1.5
        xi = PseudoObservations(xi_hat=xi_values, sigma2=sigma2)
        b_hat = bias(b_hat_values)
        solution = SelectionService.adaptive_lasso_solve(xi, b_hat, lam, omega)
        penalty = lam / np.maximum(np.abs(b_hat_values), Config.BHAT_FLOOR) ** omega

        for i in range(n):
            def objective(b, i=i):
                return (xi_values[i] - b) ** 2 / sigma2[i] + penalty[i] * abs(b)

            lo, hi = min(0.0, xi_values[i]) - 1.0, max(0.0, xi_values[i]) + 1.0
            candidates = [0.0]
            for bounds in ((lo, 0.0), (0.0, hi)):
                found = minimize_scalar(objective, bounds=bounds, method="bounded", options={"xatol": 1e-10})
                candidates.append(found.x)
            brute = min(candidates, key=objective)
            assert abs(solution.b_tilde[i] - brute) <= 1e-6
            assert objective(solution.b_tilde[i]) <= objective(brute) + 1e-12

    def test_shrinkage_is_monotone_in_lambda(self):
        rng = np.random.default_rng(4)
        xi = PseudoObservations(xi_hat=rng.normal(scale=2.0, size=200), sigma2=rng.uniform(0.5, 2.0, 200))
        b_hat = bias(rng.normal(size=200))
        previous = None
        for lam in np.geomspace(1e-3, SelectionService.lambda_max(xi, b_hat, 1.0), 25):
            magnitude = np.abs(SelectionService.adaptive_lasso_solve(xi, b_hat, lam, 1.0).b_tilde)
            if previous is not None:
                assert np.all(magnitude <= previous + 1e-12)
            previous = magnitude
        assert np.all(previous == 0)


class TestTuning:

    @pytest.fixture
    def planted(self):
        rng = np.random.default_rng(8)
        bias_true = np.where(np.arange(60) < 20, 3.0, 0.0)
        xi = bias_true + rng.normal(size=60)
        b_hat = bias_true + 0.3 * rng.normal(size=60)
        return pseudo(xi), bias(b_hat), bias_true

    def test_recovers_planted_bias(self, planted):
        xi, b_hat, truth = planted
        selection = SelectionService.select(xi, b_hat, seed=1)
        mask = selection.mask
        assert mask[truth == 0].mean() > 0.7
        assert mask[truth > 0].mean() < 0.25

    def test_path_covers_the_grid(self, planted):
        xi, b_hat, _ = planted
        lam, omega, path = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid=[0.1, 1.0, 10.0], omega_grid=[1.0, 2.0], folds=5
        )
        assert len(path) == 6
        assert {p["omega"] for p in path} == {1.0, 2.0}
        best = min(p["score"] for p in path)
        assert any(p["lambda"] == lam and p["omega"] == omega and p["score"] == best for p in path)

    def test_deterministic_given_seed(self, planted):
        xi, b_hat, _ = planted
        first = SelectionService.cross_validate_tuning(xi, b_hat, seed=3)
        second = SelectionService.cross_validate_tuning(xi, b_hat, seed=3)
        assert first[:2] == second[:2]

    def test_ties_go_to_larger_lambda(self):
        xi, b_hat = pseudo(np.zeros(10) + 1e-3 * np.arange(10)), bias(np.full(10, 10.0))
        lam, _, _ = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid=[1e3, 1e4], omega_grid=[1.0], folds=2
        )
        assert lam == 1e4

    def test_identical_pseudo_observations(self, caplog):
        xi, b_hat = pseudo(np.full(6, 0.2)), bias(np.full(6, 0.2))
        with caplog.at_level(logging.WARNING, logger="hybrid_control"):
            lam, omega, path = SelectionService.cross_validate_tuning(xi, b_hat, lambda_grid=[0.5, 2.0], folds=3)
        assert (lam, omega, path) == (2.0, 1.0, [])
        assert "identical" in caplog.text

    def test_too_few_external_controls(self):
        with pytest.raises(ValueError):
            SelectionService.cross_validate_tuning(pseudo([1.0, 2.0]), bias([1.0, 2.0]), folds=5)

    def test_selection_risk(self):
        xi = pseudo([0.0, 2.0, 3.0], sigma2=4.0)
        risk = SelectionService.selection_risk(xi, np.array([True, True, False]))
        npt.assert_allclose(risk, [-1.0, 0.0, 1.0])

    def test_each_fold_is_scored_with_refit_bias(self, planted):
        xi, b_hat, _ = planted
        training = []

        def refit(train):
            training.append(train.copy())
            return b_hat

        with_refit = SelectionService.cross_validate_tuning(xi, b_hat, folds=5, seed=2, refit=refit)
        assert len(training) == 5
        held = [~mask for mask in training]
        npt.assert_array_equal(np.sum(held, axis=0), np.ones(60))
        for mask in training:
            assert mask.sum() == 48
        without = SelectionService.cross_validate_tuning(xi, b_hat, folds=5, seed=2)
        assert with_refit == without

    def test_refit_bias_changes_the_held_out_score(self, planted):
        xi, b_hat, truth = planted

        def refit(train):
            return bias(np.where(train, b_hat.b_hat, 50.0))

        _, _, path = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid=[5.0], omega_grid=[1.0], folds=4, refit=refit
        )
        _, _, plain = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid=[5.0], omega_grid=[1.0], folds=4
        )
        assert path[0]["score"] != plain[0]["score"]

    def test_refit_must_cover_every_external_control(self, planted):
        xi, b_hat, _ = planted
        with pytest.raises(ValueError):
            SelectionService.cross_validate_tuning(xi, b_hat, folds=3, refit=lambda train: bias(np.ones(5)))

    def test_cp_threshold_near_root_two(self):
        rng = np.random.default_rng(12)
        truth = np.where(np.arange(4000) < 1000, 3.0, 0.0)
        xi = pseudo(truth + rng.normal(size=truth.size))
        b_hat = bias(np.ones(truth.size))
        lam, omega, _ = SelectionService.cross_validate_tuning(
            xi, b_hat, lambda_grid=np.linspace(0.5, 6.0, 56), omega_grid=[1.0], folds=5
        )
        threshold = lam / 2
        assert 1.0 < threshold < 1.9

    def test_single_external_control_uses_largest_lambda(self):
        selection = SelectionService.select(pseudo([0.7]), bias([0.7]))
        assert selection.selected == (0,)

    def test_selection_config_grid(self):
        assert SelectionConfig().fixed_grid() is None
        assert SelectionConfig(lambda_grid=[2.0, 0.5]).fixed_grid() == [0.5, 2.0]
        with pytest.raises(ValueError):
            SelectionConfig(omega_grid=[])


class TestSelectionInputs:

    def test_bias_estimates_are_differences(self):
        b_hat = SelectionService.compute_bias_estimates(np.array([1.0, 2.0]), np.array([0.5, 2.5]))
        npt.assert_allclose(b_hat.b_hat, [0.5, -0.5])

    def test_pseudo_observations_scale(self, simulated):
        from hybrid_control.services.calibration_service import CalibrationService

        weights = CalibrationService.solve_calibration(CalibrationService.build_problem(simulated))
        mu0 = np.zeros(simulated.n_ec)
        xi = SelectionService.compute_pseudo_observations(simulated, weights, mu0, residual_variance=2.0)
        factor = simulated.n / simulated.n_rpct * weights.weights
        npt.assert_allclose(xi.xi_hat, factor * simulated.outcome[simulated.ec_mask])
        npt.assert_allclose(xi.sigma2, 2.0 * factor ** 2)
