import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gmmct.experiment import ExperimentConfig, default_config_dict
from gmmct.geometry import benchmark_geometry

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

# Ground-truth benchmark scene: attenuation, shape, angular velocity, velocity.
BENCHMARK = [
    (15.0447, [[10.2751, 10.3696], [0.0, 17.9620]], 5.9297, (1.00, 3.00)),
    (21.9112, [[21.3949, 11.3376], [0.0, 7.7181]], 5.1986, (1.50, 1.80)),
    (24.7690, [[24.0554, 11.2340], [0.0, 14.9712]], 5.0637, (0.80, 2.50)),
    (30.3459, [[12.1598, 9.2022], [0.0, 25.2080]], 5.9312, (0.75, 1.20)),
    (36.3180, [[8.5057, 12.9073], [0.0, 24.6596]], 5.4526, (2.00, 3.00)),
]


def random_upper(rng, d, lo=0.5, hi=2.0):
    U = np.triu(rng.normal(size=(d, d)))
    U[np.diag_indices(d)] = rng.uniform(lo, hi, d)
    return U


@pytest.fixture(scope="session")
def geom():
    return benchmark_geometry()


@pytest.fixture(scope="session")
def benchmark_config():
    return ExperimentConfig.from_dict(default_config_dict())


@pytest.fixture(scope="session")
def truth(benchmark_config):
    return benchmark_config.truth


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""

    def log(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
