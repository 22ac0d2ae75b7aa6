from __future__ import annotations

import numpy as np
import pytest

from cluster.profiles import ComputeSampler, WorkerProfile, analytic_rates, constant_profiles
from errors import ConfigError


def test_samplers_draw_expected_ranges() -> None:
    rng = np.random.default_rng(0)
    assert ComputeSampler("constant", seconds=2.5).sample(rng) == 2.5
    uniform = ComputeSampler("uniform", low=1.0, high=2.0)
    draws = [uniform.sample(rng) for _ in range(500)]
    assert 1.0 <= min(draws) and max(draws) <= 2.0
    lognormal = ComputeSampler("lognormal", median=1.0, sigma=0.25)
    draws = np.array([lognormal.sample(rng) for _ in range(4000)])
    assert np.median(draws) == pytest.approx(1.0, rel=0.05)
    assert lognormal.mean == pytest.approx(np.exp(0.5 * 0.25 ** 2))


def test_sampler_validation() -> None:
    with pytest.raises(ConfigError):
        ComputeSampler("constant", seconds=0.0)
    with pytest.raises(ConfigError):
        ComputeSampler("uniform", low=2.0, high=1.0)
    with pytest.raises(ConfigError):
        ComputeSampler("gamma")


def test_slowdown_schedule_multiplies_compute_time() -> None:
    profile = WorkerProfile(0, slowdown=((10.0, 4.0), (5.0, 2.0)))
    rng = np.random.default_rng(0)
    assert profile.compute_time(rng, 1.0) == 1.0
    assert profile.compute_time(rng, 5.0) == 2.0
    assert profile.compute_time(rng, 12.0) == 4.0


def test_failure_intervals_are_validated() -> None:
    with pytest.raises(ConfigError):
        WorkerProfile(0, failures=((5.0, 3.0),))
    with pytest.raises(ConfigError):
        WorkerProfile(0, failures=((1.0, 6.0), (4.0, 8.0)))
    with pytest.raises(ConfigError):
        WorkerProfile(0, failures=((1.0, None), (4.0, 8.0)))
    profile = WorkerProfile(0, failures=((4.0, 8.0), (1.0, 2.0)))
    assert profile.failures == ((1.0, 2.0), (4.0, 8.0))


def test_analytic_rates_for_a_straggler() -> None:
    profiles = constant_profiles([1, 1, 1, 4])
    assert analytic_rates(profiles, 8) == [8.0, 8.0, 8.0, 2.0]
    assert not profiles[0].uses_pipeline
    assert WorkerProfile(1, download_time=0.5).uses_pipeline
