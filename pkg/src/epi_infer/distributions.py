"""Primitive distributions used at random-choice sites.

Each family validates its parameters at construction time, so an invalid
distribution can never reach a trace. Log densities/masses are written out
explicitly to keep the support contract airtight: ``log_prob`` never returns
NaN, and returns -inf exactly when the value lies outside the support.
Sampling delegates to ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Value",
    "ValueTypeError",
    "Distribution",
    "Uniform",
    "Normal",
    "LogNormal",
    "Beta",
    "Gamma",
    "Bernoulli",
    "Binomial",
    "Categorical",
    "Poisson",
    "log_prob",
    "sample_value",
    "canonical_value",
    "value_to_json",
    "value_from_json",
    "dist_to_json",
    "dist_from_json",
]

# A trace value: real scalar, integer scalar, boolean, or finite real vector.
Value = Union[bool, int, float, tuple]

_LOG_2PI = math.log(2.0 * math.pi)


class ValueTypeError(TypeError):
    """A value's kind does not match the distribution (e.g. a real for Categorical)."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _finite(x: float) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _as_real(value: Value) -> float:
    """Coerce to float; bools and non-scalars are a type mismatch."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueTypeError(f"expected a real scalar, got {value!r}")
    return float(value)


def _as_count(value: Value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueTypeError(f"expected an integer scalar, got {value!r}")
    return value


def _as_bool(value: Value) -> bool:
    if not isinstance(value, bool):
        raise ValueTypeError(f"expected a boolean, got {value!r}")
    return value


class Distribution:
    """Base class for the nine primitive families."""

    family: str = ""

    def log_prob(self, value: Value) -> float:
        """Log density/mass at ``value``; -inf outside the support, never NaN."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> Value:
        """Draw one value from the distribution."""
        raise NotImplementedError

    def coerce_value(self, value: Value) -> Value:
        """Return ``value`` as this family's canonical scalar kind, or raise ValueTypeError."""
        raise NotImplementedError

    def params(self) -> dict:
        """Parameter map, in declaration order (used by the wire/file codecs)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(Distribution):
    low: float
    high: float
    family = "uniform"

    def __post_init__(self):
        _require(_finite(self.low) and _finite(self.high), "uniform bounds must be finite")
        _require(self.low < self.high, f"uniform requires low < high, got [{self.low}, {self.high}]")
        object.__setattr__(self, "low", float(self.low))
        object.__setattr__(self, "high", float(self.high))

    def coerce_value(self, value):
        return _as_real(value)

    def log_prob(self, value):
        v = _as_real(value)
        if self.low <= v <= self.high:
            return -math.log(self.high - self.low)
        return -math.inf

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))

    def params(self):
        return {"low": self.low, "high": self.high}


@dataclass(frozen=True)
class Normal(Distribution):
    mean: float
    std: float
    family = "normal"

    def __post_init__(self):
        _require(_finite(self.mean) and _finite(self.std), "normal parameters must be finite")
        _require(self.std > 0, f"normal requires std > 0, got {self.std}")
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "std", float(self.std))

    def coerce_value(self, value):
        return _as_real(value)

    def log_prob(self, value):
        v = _as_real(value)
        if not math.isfinite(v):
            return -math.inf
        z = (v - self.mean) / self.std
        return -0.5 * (_LOG_2PI + z * z) - math.log(self.std)

    def sample(self, rng):
        return float(rng.normal(self.mean, self.std))

    def params(self):
        return {"mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class LogNormal(Distribution):
    mu: float
    sigma: float
    family = "log_normal"

    def __post_init__(self):
        _require(_finite(self.mu) and _finite(self.sigma), "log_normal parameters must be finite")
        _require(self.sigma > 0, f"log_normal requires sigma > 0, got {self.sigma}")
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma", float(self.sigma))

    def coerce_value(self, value):
        return _as_real(value)

    def log_prob(self, value):
        v = _as_real(value)
        if not math.isfinite(v) or v <= 0.0:
            return -math.inf
        z = (math.log(v) - self.mu) / self.sigma
        return -0.5 * (_LOG_2PI + z * z) - math.log(self.sigma) - math.log(v)

    def sample(self, rng):
        return float(rng.lognormal(self.mu, self.sigma))

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Beta(Distribution):
    alpha: float
    beta: float
    family = "beta"

    def __post_init__(self):
        _require(_finite(self.alpha) and _finite(self.beta), "beta parameters must be finite")
        _require(self.alpha > 0 and self.beta > 0, "beta requires alpha > 0 and beta > 0")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    def coerce_value(self, value):
        return _as_real(value)

    def log_prob(self, value):
        # Support treated as the open interval (0, 1); the endpoints would
        # produce infinite or indeterminate densities for some shapes.
        v = _as_real(value)
        if not 0.0 < v < 1.0:
            return -math.inf
        lognorm = math.lgamma(self.alpha + self.beta) - math.lgamma(self.alpha) - math.lgamma(self.beta)
        return lognorm + (self.alpha - 1.0) * math.log(v) + (self.beta - 1.0) * math.log1p(-v)

    def sample(self, rng):
        return float(rng.beta(self.alpha, self.beta))

    def params(self):
        return {"alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class Gamma(Distribution):
    shape: float
    rate: float
    family = "gamma"

    def __post_init__(self):
        _require(_finite(self.shape) and _finite(self.rate), "gamma parameters must be finite")
        _require(self.shape > 0 and self.rate > 0, "gamma requires shape > 0 and rate > 0")
        object.__setattr__(self, "shape", float(self.shape))
        object.__setattr__(self, "rate", float(self.rate))

    def coerce_value(self, value):
        return _as_real(value)

    def log_prob(self, value):
        v = _as_real(value)
        if not math.isfinite(v) or v <= 0.0:
            return -math.inf
        return (
            self.shape * math.log(self.rate)
            - math.lgamma(self.shape)
            + (self.shape - 1.0) * math.log(v)
            - self.rate * v
        )

    def sample(self, rng):
        return float(rng.gamma(self.shape, 1.0 / self.rate))

    def params(self):
        return {"shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class Bernoulli(Distribution):
    p: float
    family = "bernoulli"

    def __post_init__(self):
        _require(_finite(self.p), "bernoulli p must be finite")
        _require(0.0 <= self.p <= 1.0, f"bernoulli requires p in [0, 1], got {self.p}")
        object.__setattr__(self, "p", float(self.p))

    def coerce_value(self, value):
        return _as_bool(value)

    def log_prob(self, value):
        v = _as_bool(value)
        q = self.p if v else 1.0 - self.p
        return math.log(q) if q > 0.0 else -math.inf

    def sample(self, rng):
        return bool(rng.random() < self.p)

    def params(self):
        return {"p": self.p}


@dataclass(frozen=True)
class Binomial(Distribution):
    n: int
    p: float
    family = "binomial"

    def __post_init__(self):
        _require(isinstance(self.n, int) and not isinstance(self.n, bool), "binomial n must be an integer")
        _require(self.n >= 0, f"binomial requires n >= 0, got {self.n}")
        _require(_finite(self.p), "binomial p must be finite")
        _require(0.0 <= self.p <= 1.0, f"binomial requires p in [0, 1], got {self.p}")
        object.__setattr__(self, "p", float(self.p))

    def coerce_value(self, value):
        return _as_count(value)

    def log_prob(self, value):
        k = _as_count(value)
        if k < 0 or k > self.n:
            return -math.inf
        if self.p == 0.0:
            return 0.0 if k == 0 else -math.inf
        if self.p == 1.0:
            return 0.0 if k == self.n else -math.inf
        logcomb = math.lgamma(self.n + 1) - math.lgamma(k + 1) - math.lgamma(self.n - k + 1)
        return logcomb + k * math.log(self.p) + (self.n - k) * math.log1p(-self.p)

    def sample(self, rng):
        return int(rng.binomial(self.n, self.p))

    def params(self):
        return {"n": self.n, "p": self.p}


@dataclass(frozen=True)
class Categorical(Distribution):
    probs: tuple
    family = "categorical"

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        _require(len(probs) >= 1, "categorical requires at least one category")
        _require(all(math.isfinite(p) and p >= 0.0 for p in probs), "categorical probs must be finite and >= 0")
        total = math.fsum(probs)
        _require(total > 0.0, "categorical probs must not all be zero")
        probs = tuple(p / total for p in probs)
        _require(abs(math.fsum(probs) - 1.0) <= 1e-9, "categorical normalization failed")
        object.__setattr__(self, "probs", probs)

    def coerce_value(self, value):
        return _as_count(value)

    def log_prob(self, value):
        k = _as_count(value)
        if k < 0 or k >= len(self.probs):
            return -math.inf
        q = self.probs[k]
        return math.log(q) if q > 0.0 else -math.inf

    def sample(self, rng):
        u = rng.random()
        acc = 0.0
        for i, q in enumerate(self.probs):
            acc += q
            if u < acc:
                return i
        return len(self.probs) - 1  # guard against accumulated rounding

    def params(self):
        return {"probs": list(self.probs)}


@dataclass(frozen=True)
class Poisson(Distribution):
    rate: float
    family = "poisson"

    def __post_init__(self):
        _require(_finite(self.rate), "poisson rate must be finite")
        _require(self.rate > 0, f"poisson requires rate > 0, got {self.rate}")
        object.__setattr__(self, "rate", float(self.rate))

    def coerce_value(self, value):
        return _as_count(value)

    def log_prob(self, value):
        k = _as_count(value)
        if k < 0:
            return -math.inf
        return k * math.log(self.rate) - self.rate - math.lgamma(k + 1)

    def sample(self, rng):
        return int(rng.poisson(self.rate))

    def params(self):
        return {"rate": self.rate}


def log_prob(dist: Distribution, value: Value) -> float:
    """Log density/mass of ``value`` under ``dist`` (-inf outside support)."""
    return dist.log_prob(value)


def sample_value(dist: Distribution, rng: np.random.Generator) -> Value:
    """Draw one value from ``dist`` using ``rng``."""
    return dist.sample(rng)


# ---------------------------------------------------------------------------
# Value and distribution codecs (shared by the trace file format and the wire
# protocol; both use family + params objects).
# ---------------------------------------------------------------------------

def canonical_value(value) -> Value:
    """Normalize to a canonical Value: bool, int, float, or tuple of floats.

    Rejects NaN and infinities; traces store finite values only.
    """
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, np.integer)) :
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value not allowed: {value!r}")
        return v
    if isinstance(value, (list, tuple, np.ndarray)):
        vec = tuple(float(x) for x in value)
        if not all(math.isfinite(x) for x in vec):
            raise ValueError("non-finite entry in vector value")
        return vec
    raise ValueTypeError(f"unsupported value kind: {type(value).__name__}")


def value_to_json(value: Value):
    if isinstance(value, tuple):
        return list(value)
    return value


def value_from_json(obj) -> Value:
    if isinstance(obj, list):
        return tuple(float(x) for x in obj)
    if isinstance(obj, (bool, int, float)):
        return canonical_value(obj)
    raise ValueError(f"cannot decode value from {obj!r}")


_FAMILIES = {
    "uniform": (Uniform, ("low", "high")),
    "normal": (Normal, ("mean", "std")),
    "log_normal": (LogNormal, ("mu", "sigma")),
    "beta": (Beta, ("alpha", "beta")),
    "gamma": (Gamma, ("shape", "rate")),
    "bernoulli": (Bernoulli, ("p",)),
    "binomial": (Binomial, ("n", "p")),
    "categorical": (Categorical, ("probs",)),
    "poisson": (Poisson, ("rate",)),
}


def dist_to_json(dist: Distribution) -> dict:
    return {"family": dist.family, "params": dist.params()}


def dist_from_json(obj) -> Distribution:
    """Build a distribution from a ``{"family": ..., "params": {...}}`` object.

    Raises ValueError for unknown families or missing/invalid parameters.
    """
    if not isinstance(obj, dict):
        raise ValueError(f"distribution must be an object, got {obj!r}")
    family = obj.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown distribution family: {family!r}")
    cls, names = _FAMILIES[family]
    params = obj.get("params")
    if not isinstance(params, dict):
        raise ValueError(f"distribution params must be an object, got {params!r}")
    missing = [name for name in names if name not in params]
    if missing:
        raise ValueError(f"{family} missing parameter(s): {', '.join(missing)}")
    kwargs = {}
    for name in names:
        raw = params[name]
        if name == "probs":
            if not isinstance(raw, list):
                raise ValueError("categorical probs must be an array")
            kwargs[name] = tuple(raw)
        elif name == "n":
            if isinstance(raw, bool) or not isinstance(raw, int):
                raise ValueError(f"binomial n must be an integer, got {raw!r}")
            kwargs[name] = raw
        else:
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ValueError(f"parameter {name} must be a number, got {raw!r}")
            kwargs[name] = float(raw)
    return cls(**kwargs)
