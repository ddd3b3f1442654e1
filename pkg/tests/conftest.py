import pytest

from steproute.distributions import Beta, LogNormalInt, UniformInt
from steproute.simenv import EnvConfig, ScoreEmission


@pytest.fixture
def canonical_env() -> EnvConfig:
    """Benchmark environment used across policy tests: weak accuracy 0.6,
    strong accuracy 0.95, Beta(8,2)/Beta(2,5) score emissions."""
    return EnvConfig(
        p_weak=0.6,
        p_strong=0.95,
        horizon_dist=UniformInt(6, 30),
        weak_token_dist=LogNormalInt(3.0, 0.5),
        strong_token_dist=LogNormalInt(3.4, 0.5),
        score_emission=ScoreEmission(Beta(8, 2), Beta(2, 5)),
    )
