"""Parametric distribution specs for simulator configuration.

Specs are plain data parsed from JSON (``{"kind": ..., ...}``) and expose
``sample``/``sample_many`` plus an analytic ``mean``.  Supported kinds:

- ``beta``: Beta(a, b) on [0, 1] (score emissions)
- ``point``: degenerate point mass (scores or token counts)
- ``uniform_int``: uniform integer on [lo, hi] inclusive (horizons, tokens)
- ``lognormal_int``: round(LogNormal(mu, sigma)) clamped to >= min (tokens)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Beta:
    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("beta", "shape parameters must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.beta(self.a, self.b))

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.beta(self.a, self.b, size=n)

    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def to_dict(self) -> dict:
        return {"kind": "beta", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class Point:
    value: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.value)

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, float(self.value))

    def mean(self) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {"kind": "point", "value": self.value}


@dataclass(frozen=True)
class UniformInt:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError("uniform_int", f"lo {self.lo} exceeds hi {self.hi}")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(self.lo, self.hi + 1, size=n)

    def mean(self) -> float:
        return (self.lo + self.hi) / 2.0

    def to_dict(self) -> dict:
        return {"kind": "uniform_int", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class LogNormalInt:
    mu: float
    sigma: float
    min: int = 1

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("lognormal_int", "sigma must be nonnegative")
        if self.min < 1:
            raise ConfigError("lognormal_int", "min must be at least 1")

    def sample(self, rng: np.random.Generator) -> int:
        return int(max(self.min, round(rng.lognormal(self.mu, self.sigma))))

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        draws = np.rint(rng.lognormal(self.mu, self.sigma, size=n)).astype(int)
        return np.maximum(draws, self.min)

    def mean(self) -> float:
        # Continuous lognormal mean; rounding bias is negligible at token scale.
        return max(float(self.min), math.exp(self.mu + self.sigma**2 / 2.0))

    def to_dict(self) -> dict:
        return {"kind": "lognormal_int", "mu": self.mu, "sigma": self.sigma, "min": self.min}


_KINDS = {"beta": Beta, "point": Point, "uniform_int": UniformInt, "lognormal_int": LogNormalInt}

DistSpec = Beta | Point | UniformInt | LogNormalInt


def parse_dist(obj: dict, path: str = "distribution") -> DistSpec:
    """Build a distribution spec from its JSON form; errors carry ``path``."""
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(path, 'expected an object with a "kind" field')
    kind = obj["kind"]
    cls = _KINDS.get(kind)
    if cls is None:
        raise ConfigError(f"{path}.kind", f"unknown kind {kind!r}")
    kwargs = {k: v for k, v in obj.items() if k != "kind"}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, f"bad parameters for {kind}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}", str(exc)) from exc
