from pathlib import Path

from hybrid_control import __version__


class Config:
    PROJECT_NAME = "Hybrid Control"
    VERSION = __version__
    BASE_DIR = Path(__file__).resolve().parent.parent.parent
    CONFIG_DIR = BASE_DIR / "config"
    CONFIG_FILE = CONFIG_DIR / "config.json"
    SIMULATION_FILE = CONFIG_DIR / "simulation.json"

    # data model
    POSITIVITY_EPS = 1e-6

    # nuisance fits
    RIDGE_PENALTY = 1e-8
    SEPARATION_CAP = 20.0
    LOGISTIC_TOL = 1e-8
    LOGISTIC_MAX_ITER = 100
    CROSS_FIT_FOLDS = 5
    BOOSTING_SHRINKAGE = 0.1
    BOOSTING_DEPTHS = (1, 2, 3)
    BOOSTING_TREES = tuple(range(50, 501, 50))

    # calibration
    CALIBRATION_TOL = 1e-8
    CALIBRATION_MAX_ITER = 200
    CALIBRATION_NORM_CAP = 100.0
    CALIBRATION_STALL_WINDOW = 20
    CALIBRATION_STALL_ACCEPT = 100.0

    # selection
    BHAT_FLOOR = 1e-8
    LAMBDA_GRID_SIZE = 30
    LAMBDA_MIN_RATIO = 1e-3
    OMEGA_GRID = (1.0, 2.0)
    CV_FOLDS = 5

    # estimators
    DENOMINATOR_GUARD = 1e-10
    ALPHA = 0.05

    # pooling
    CONDITION_LIMIT = 1e10
    POOLING_RIDGE = 1e-8

    # simulation
    COEFFICIENT_SEED = 20240
    REJECTION_BATCHES = 1000
    TRIAL_MEAN_DRAWS = 200_000
