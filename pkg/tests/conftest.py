import numpy as np
import pytest

from hybrid_control.models.dataset import TrialDataset
from hybrid_control.models.estimate import EifInputs
from hybrid_control.models.simulation import ScenarioConfig
from hybrid_control.services.simulation_service import SimulationService


@pytest.fixture
def three_record_inputs():
    """Two RPCT records and one EC: tau_acw = 0.5 with r = 1, 1.0 with r = 0."""
    return EifInputs(
        in_rpct=[True, True, False],
        treatment=[1, 0, 0],
        outcome=[2.0, 1.0, 2.0],
        propensity=0.5,
        mu1=[2.0, 2.0, 2.0],
        mu0=[1.0, 1.0, 1.0],
        q=[2.0, 2.0, 2.0],
        r=1.0,
    )


@pytest.fixture
def small_scenario():
    return ScenarioConfig(n_control=30, n_treated=60, n_ec=120, p=4, replications=4, seed=7)


@pytest.fixture
def simulated(small_scenario):
    dataset, _ = SimulationService.generate_dataset(small_scenario, 11)
    return dataset


@pytest.fixture
def two_group_dataset():
    rng = np.random.default_rng(3)
    n_rpct, n_ec = 80, 60
    X = rng.normal(size=(n_rpct + 2 * n_ec, 3))
    source = np.concatenate([np.zeros(n_rpct, dtype=int), np.ones(n_ec, dtype=int), np.full(n_ec, 2)])
    treatment = np.zeros(source.size, dtype=int)
    treatment[rng.permutation(n_rpct)[: n_rpct // 2]] = 1
    outcome = X @ np.array([0.5, -0.3, 0.2]) + 0.4 * treatment + rng.normal(size=source.size)
    outcome[source == 2] += 1.0
    return TrialDataset(source=source, treatment=treatment, outcome=outcome, covariates=X, propensity=0.5)


def random_inputs(rng, n_rpct=40, n_ec=30, r=0.8):
    """Random valid influence inputs with density-ratio weights summing to N_R over the ECs."""
    n = n_rpct + n_ec
    in_rpct = np.arange(n) < n_rpct
    treatment = np.where(in_rpct, rng.integers(0, 2, n), 0)
    treatment[0], treatment[1] = 1, 0
    q = rng.uniform(0.2, 2.0, n)
    q[~in_rpct] *= n_rpct / q[~in_rpct].sum()
    return EifInputs(
        in_rpct=in_rpct,
        treatment=treatment,
        outcome=rng.normal(size=n),
        propensity=rng.uniform(0.2, 0.8, n),
        mu1=rng.normal(size=n),
        mu0=rng.normal(size=n),
        q=q,
        r=r,
    )
