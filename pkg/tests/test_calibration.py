import numpy as np
import numpy.testing as npt
import pytest

from hybrid_control.core.exceptions import ConvergenceError, InfeasibleCalibrationError
from hybrid_control.models.calibration import CalibrationProblem
from hybrid_control.models.nuisance import BasisSpec
from hybrid_control.services.calibration_service import CalibrationService


def problem(ec_values, target):
    basis = np.asarray(ec_values, dtype=float).reshape(len(ec_values), -1)
    return CalibrationProblem(
        ec_basis=basis,
        target_moments=np.atleast_1d(np.asarray(target, dtype=float)),
        basis_spec=BasisSpec(),
        center=np.zeros(basis.shape[1]),
        scale=np.ones(basis.shape[1]),
    )


def random_feasible(rng):
    """EC basis rows and a target strictly inside their convex hull, with one known feasible weight vector."""
    n_ec, k = int(rng.integers(20, 201)), int(rng.integers(1, 6))
    ec = rng.normal(size=(n_ec, k))
    feasible = 0.5 / n_ec + 0.5 * rng.dirichlet(np.ones(n_ec))
    return ec, feasible @ ec, feasible


def project(ec, target, w):
    """Least-norm correction of w onto {sum w = 1, w @ ec = target}."""
    constraints = np.column_stack([np.ones(ec.shape[0]), ec]).T
    gap = constraints @ w - np.concatenate([[1.0], target])
    return w - constraints.T @ np.linalg.solve(constraints @ constraints.T, gap)


class TestRandomFeasibleProblems:

    @pytest.mark.parametrize("seed", range(100))
    def test_moments_and_optimality(self, seed):
        rng = np.random.default_rng(seed)
        ec, target, feasible = random_feasible(rng)
        weights = CalibrationService.solve_calibration(problem(ec, target))
        assert weights.residual <= 1e-8
        assert weights.dual_residual <= 1e-8

        comparators = [feasible]
        for share in (0.05, 0.2, 0.5):
            candidate = (1 - share) * feasible + share * project(ec, target, rng.dirichlet(np.ones(ec.shape[0])))
            if np.all(candidate > 0):
                comparators.append(candidate)
        for candidate in comparators:
            assert weights.objective <= np.sum(candidate * np.log(candidate)) + 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(1000 + seed)
        ec, target, _ = random_feasible(rng)
        k = ec.shape[1]
        transform = 2 * np.eye(k) + 0.3 * rng.normal(size=(k, k))
        offset = rng.normal(size=k)
        original = CalibrationService.solve_calibration(problem(ec, target))
        moved = CalibrationService.solve_calibration(problem(ec @ transform + offset, target @ transform + offset))
        npt.assert_allclose(moved.weights, original.weights, rtol=1e-5, atol=1e-10)


class TestSolveCalibration:

    def test_two_point_example(self):
        weights = CalibrationService.solve_calibration(problem([0.0, 1.0], 0.75))
        npt.assert_allclose(weights.weights, [0.25, 0.75], atol=1e-9)
        assert weights.residual <= 1e-8
        assert weights.weights.sum() == pytest.approx(1.0)

    def test_target_outside_hull(self):
        with pytest.raises(InfeasibleCalibrationError):
            CalibrationService.solve_calibration(problem([0.0, 1.0], 1.5))

    def test_iteration_limit(self):
        with pytest.raises(ConvergenceError):
            CalibrationService.solve_calibration(problem([0.0, 1.0], 0.75), max_iter=1)

    def test_target_at_the_ec_mean_gives_uniform_weights(self):
        weights = CalibrationService.solve_calibration(problem([0.0, 1.0, 2.0, 3.0], 1.5))
        npt.assert_allclose(weights.weights, 0.25)
        assert weights.iterations == 0

    def test_constant_column_must_match(self):
        ec = np.column_stack([[0.0, 1.0, 2.0], [1.0, 1.0, 1.0]])
        CalibrationService.solve_calibration(problem(ec, [1.2, 1.0]))
        with pytest.raises(InfeasibleCalibrationError):
            CalibrationService.solve_calibration(problem(ec, [1.2, 2.0]))

    def test_exponential_family_form(self):
        rng = np.random.default_rng(5)
        ec = rng.normal(size=(200, 3))
        prob = problem(ec, [0.2, -0.1, 0.3])
        weights = CalibrationService.solve_calibration(prob)
        npt.assert_allclose(weights.weights @ ec, [0.2, -0.1, 0.3], atol=1e-9)
        npt.assert_allclose(CalibrationService.evaluate(prob, weights, ec), weights.weights, rtol=1e-10)
        assert np.all(weights.weights > 0)


class TestDatasetCalibration:

    def test_balances_simulated_covariates(self, simulated):
        prob = CalibrationService.build_problem(simulated)
        weights = CalibrationService.solve_calibration(prob)
        X = simulated.covariates
        npt.assert_allclose(
            weights.weights @ X[simulated.ec_mask], X[simulated.rpct_mask].mean(axis=0), atol=1e-8
        )
        diagnostics = CalibrationService.balance_diagnostics(simulated, weights)
        assert max(abs(v) for v in diagnostics["smd_after"].values()) < 1e-6
        assert 1 <= diagnostics["effective_sample_size"] <= simulated.n_ec

    def test_density_ratio_scale_sums_to_trial_size(self, simulated):
        prob = CalibrationService.build_problem(simulated)
        weights = CalibrationService.solve_calibration(prob)
        q = CalibrationService.density_ratio_scale(weights, simulated.n_rpct)
        assert q.sum() == pytest.approx(simulated.n_rpct)
        frame = CalibrationService.weights_frame(prob, weights, simulated.n_rpct)
        assert list(frame.columns) == ["record_id", "weight", "density_ratio_weight"]
        assert len(frame) == simulated.n_ec


class TestEntropyOptimum:

    def test_three_point_example_matches_brute_force(self):
        weights = CalibrationService.solve_calibration(problem([0.0, 1.0, 2.0], 0.5))
        # the mean constraint leaves one free coordinate: q3 in [0, 0.25]
        q3 = np.linspace(1e-9, 0.25 - 1e-9, 250001)
        q2 = 0.5 - 2 * q3
        q1 = 1.0 - q2 - q3
        grid = np.column_stack([q1, q2, q3])
        entropy = np.sum(grid * np.log(grid), axis=1)
        npt.assert_allclose(weights.weights, grid[np.argmin(entropy)], atol=1e-4)


class TestStalledResidual:

    @pytest.fixture(scope="class")
    def prematched_problem(self):
        from hybrid_control.models.simulation import ScenarioConfig
        from hybrid_control.services.simulation_service import SimulationService

        config = ScenarioConfig(omega=0.0, seed=3)
        data_seed, _ = np.random.SeedSequence([config.seed, 43]).spawn(2)
        dataset, _ = SimulationService.generate_dataset(config, data_seed)
        e_hat = SimulationService.inclusion_scores(dataset)
        matched = SimulationService.nn_prematch(dataset, e_hat, config.n_treated - config.n_control)
        return CalibrationService.build_problem(matched)

    def test_prematched_problem_converges_at_default_tolerance(self, prematched_problem):
        weights = CalibrationService.solve_calibration(prematched_problem)
        assert weights.residual <= 1e-7
        assert weights.weights.sum() == pytest.approx(1.0)

    def test_tolerance_below_rounding_keeps_best_iterate(self, prematched_problem):
        weights = CalibrationService.solve_calibration(prematched_problem, tol=1e-10)
        assert weights.residual <= 1e-7

