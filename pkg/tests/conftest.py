import numpy as np
import pytest

from swgpc.datagen import BinaryEndpointParams, RngSpec, simulate_binary
from swgpc.design import make_uniform_design


@pytest.fixture(scope="session")
def design():
    return make_uniform_design(45, 5, 6)


@pytest.fixture(scope="session")
def small_design():
    return make_uniform_design(6, 3, 4)


@pytest.fixture(scope="session")
def null_dataset(design):
    return simulate_binary(design, BinaryEndpointParams(0.3, 0.0, 0.0, 0.05, 0.9), 10,
                           RngSpec(1234, 0))


def two_arm_dataset(rng: np.random.Generator, n_treated: int, n_control: int, p_t=0.5, p_c=0.5):
    """Single-period two-arm data on a one-cluster-per-arm layout with a constant time."""
    from swgpc.design import Dataset, EndpointHierarchy, EndpointSpec, TrialDesign
    design = TrialDesign(2, 2, 1, {1: 1, 2: 1}, {1: 2}, ((0.0, 1.0), (1.0, 2.0)))
    hier = EndpointHierarchy((("y1", EndpointSpec("binary")),))
    yt = (rng.random(n_treated) < p_t).astype(float)
    yc = (rng.random(n_control) < p_c).astype(float)
    n = n_treated + n_control
    period = np.r_[np.full(n_treated, 2), np.ones(n_control, int)]
    time = np.where(period == 2, 1.5, 0.5)
    return Dataset(design, hier, np.ones(n, int), period, time, (period == 2).astype(int),
                   np.r_[yt, yc][:, None])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "_cache", {}).get("_lines") if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
