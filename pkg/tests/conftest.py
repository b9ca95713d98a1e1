import numpy as np
import pytest

from reflopt.geometry import DomainSpec, constant_profile
from reflopt.sources import separable_source, uniform_source, uniform_target


@pytest.fixture(scope="session")
def domain():
    return DomainSpec(-1.0, 1.0, np.pi / 4.0, 3.0 * np.pi / 4.0, -2.0, 2.0)


@pytest.fixture(scope="session")
def smooth_source(domain):
    return separable_source(domain)


@pytest.fixture(scope="session")
def flat_source(domain):
    return uniform_source(domain)


@pytest.fixture(scope="session")
def flat_target(domain, smooth_source):
    return uniform_target(domain, smooth_source.total_flux)


@pytest.fixture(scope="session")
def unit_profile(domain):
    return constant_profile(1.0, domain)


# expensive benchmark materializations, shared across test modules
_cache = {}


@pytest.fixture(scope="session")
def problem_a():
    if "a" not in _cache:
        from reflopt import bench
        _cache["a"] = bench.example_a(bench.BenchConfig())
    return _cache["a"]


@pytest.fixture(scope="session")
def problem_b():
    if "b" not in _cache:
        from reflopt import bench
        _cache["b"] = bench.example_b(bench.BenchConfig())
    return _cache["b"]
