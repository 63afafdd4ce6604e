import numpy as np
import pytest

from frailtyz.frailty import fit_ppl
from frailtyz.simulation import MODELS, SimConfig, calibrate_censoring, generate_dataset


@pytest.fixture(scope="session")
def sim_config():
    cfg = SimConfig(g=12, n_i=25, censor_rate_target=0.5, seed=101)
    gamma = calibrate_censoring(cfg, 0.5, n_pilot=20_000, rng=np.random.default_rng(7))
    return SimConfig(g=12, n_i=25, censor_rate_target=0.5, censor_rate_gamma=gamma, seed=101)


@pytest.fixture(scope="session")
def sim_data(sim_config):
    return generate_dataset(sim_config, np.random.default_rng(2024))


@pytest.fixture(scope="session")
def true_fit(sim_data):
    return fit_ppl(sim_data, MODELS["true"])


@pytest.fixture(scope="session")
def wrong_fit(sim_data):
    return fit_ppl(sim_data, MODELS["wrong"])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
