"""Addressed execution traces and record/redirect execution contexts.

A model is any callable that makes its random choices through an
``ExecutionContext``: ``ctx.sample(label, dist)`` for latent draws and
``ctx.observe(label, dist, value)`` for data conditioning. Running the model
once yields a ``Trace``, the ordered record of every addressed choice with
its log probability. Traces are the unit all inference engines operate on.

Two execution modes exist. ``Record`` draws everything fresh from the
context's RNG. ``Redirect`` carries a map of address -> value; bound
addresses take the bound value (scored under the distribution encountered at
that address), unbound addresses fall back to fresh sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Union

import numpy as np

from .distributions import (
    Distribution,
    Value,
    ValueTypeError,
    canonical_value,
)

__all__ = [
    "Address",
    "SampleEntry",
    "ObserveEntry",
    "TraceEntry",
    "Trace",
    "Record",
    "Redirect",
    "ExecutionMode",
    "ExecutionContext",
    "FunctionModel",
    "run_model",
    "derive_seed",
    "IncompatibleBindingError",
    "ModelExecutionError",
    "MAX_SEED",
]

MAX_SEED = 2**64 - 1


class Address(NamedTuple):
    """Stable identifier of a random-choice site: label plus occurrence index."""

    label: str
    instance: int


@dataclass(frozen=True)
class SampleEntry:
    address: Address
    dist: Distribution
    value: Value
    log_prob: float


@dataclass(frozen=True)
class ObserveEntry:
    address: Address
    dist: Distribution
    value: Value
    log_prob: float  # may be -inf when the observation falls outside support


TraceEntry = Union[SampleEntry, ObserveEntry]


@dataclass(frozen=True)
class Record:
    """Draw every choice fresh from the context RNG."""


@dataclass(frozen=True)
class Redirect:
    """Serve bound addresses from ``bindings``; unbound ones sample fresh.

    A bound value outside the support of the distribution met at that address
    signals a stale binding (control flow changed since it was recorded). By
    default that raises ``IncompatibleBindingError``; with
    ``resample_incompatible=True`` the site falls back to a fresh draw
    instead, which is what single-site MH needs to keep moving across
    structure changes.
    """

    bindings: Mapping[Address, Value]
    resample_incompatible: bool = False


ExecutionMode = Union[Record, Redirect]


class IncompatibleBindingError(Exception):
    """A redirected value does not fit the distribution found at its address."""

    def __init__(self, address: Address, dist: Distribution, value: Value):
        self.address = address
        self.dist = dist
        self.value = value
        super().__init__(
            f"bound value {value!r} at {address.label}#{address.instance} is outside "
            f"the support of {dist.family}{dist.params()}"
        )


class ModelExecutionError(Exception):
    """The model body raised; carries the partial address list for diagnostics."""

    def __init__(self, addresses: list[Address], cause: BaseException):
        self.addresses = addresses
        super().__init__(f"model failed after {len(addresses)} choice(s): {cause}")


@dataclass(frozen=True)
class Trace:
    """Completed execution record: entries, named outputs, log accumulators."""

    entries: tuple
    outputs: dict
    log_prior: float
    log_likelihood: float
    seed: int

    @property
    def log_joint(self) -> float:
        return self.log_prior + self.log_likelihood

    def sample_entries(self) -> tuple:
        return tuple(e for e in self.entries if isinstance(e, SampleEntry))

    def bindings(self) -> dict:
        """Address -> value map over sample entries (full-replay bindings)."""
        return {e.address: e.value for e in self.entries if isinstance(e, SampleEntry)}

    def latents(self) -> dict:
        """Instance 0 of every sampled label, in trace order."""
        out: dict = {}
        for e in self.entries:
            if isinstance(e, SampleEntry) and e.address.instance == 0:
                out[e.address.label] = e.value
        return out


def _check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ValueError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must fit in 64 bits, got {seed}")
    return seed


_GOLDEN = 0x9E3779B97F4A7C15
_MASK = MAX_SEED


def _mix64(x: int) -> int:
    z = x & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Deterministic child seed: the (index+1)-th splitmix64 output at ``seed``.

    Used by the engines to give each particle/step its own execution seed
    while keeping everything a pure function of the master seed.
    """
    seed = _check_seed(seed)
    return _mix64(seed + ((index + 1) * _GOLDEN) & _MASK)


class ExecutionContext:
    """Single-threaded execution state for one model run."""

    def __init__(self, mode: ExecutionMode, seed: int):
        if not isinstance(mode, (Record, Redirect)):
            raise TypeError(f"mode must be Record or Redirect, got {mode!r}")
        self.mode = mode
        self.seed = _check_seed(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self._entries: list[TraceEntry] = []
        self._counts: dict[str, int] = {}
        self._outputs: dict[str, Value] = {}
        self._log_prior = 0.0
        self._log_likelihood = 0.0
        self._finished = False

    def _next_address(self, label: str) -> Address:
        if not isinstance(label, str) or not label:
            raise ValueError(f"label must be a non-empty string, got {label!r}")
        instance = self._counts.get(label, 0)
        self._counts[label] = instance + 1
        return Address(label, instance)

    def _check_active(self) -> None:
        if self._finished:
            raise RuntimeError("execution context already finished")

    def sample(self, label: str, dist: Distribution) -> Value:
        """Resolve one random choice at ``label`` and append its entry."""
        self._check_active()
        address = self._next_address(label)
        mode = self.mode
        value = None
        bound = False
        if isinstance(mode, Redirect) and address in mode.bindings:
            raw = mode.bindings[address]
            try:
                candidate = dist.coerce_value(raw)
                lp = dist.log_prob(candidate)
            except ValueTypeError:
                candidate, lp = None, -math.inf
            if lp > -math.inf:
                value, log_p, bound = candidate, lp, True
            elif not mode.resample_incompatible:
                raise IncompatibleBindingError(address, dist, raw)
        if not bound:
            value = dist.sample(self.rng)
            log_p = dist.log_prob(value)
        entry = SampleEntry(address, dist, value, log_p)
        self._entries.append(entry)
        self._log_prior += log_p
        return value

    def observe(self, label: str, dist: Distribution, value: Value) -> None:
        """Condition on ``value`` at ``label``; never alters control flow."""
        self._check_active()
        address = self._next_address(label)
        v = dist.coerce_value(value)
        log_p = dist.log_prob(v)
        self._entries.append(ObserveEntry(address, dist, v, log_p))
        self._log_likelihood += log_p

    def set_output(self, name: str, value) -> None:
        """Record a named model output (stored on the finished trace)."""
        self._check_active()
        self._outputs[name] = canonical_value(value)

    def addresses(self) -> list[Address]:
        """Addresses touched so far (useful when a run fails part-way)."""
        return [e.address for e in self._entries]

    def finish(self, outputs: Optional[Mapping] = None) -> Trace:
        self._check_active()
        if outputs:
            for name, value in outputs.items():
                self._outputs[str(name)] = canonical_value(value)
        self._finished = True
        return Trace(
            entries=tuple(self._entries),
            outputs=dict(self._outputs),
            log_prior=self._log_prior,
            log_likelihood=self._log_likelihood,
            seed=self.seed,
        )


class FunctionModel:
    """Adapts ``fn(ctx) -> optional mapping of outputs`` to the Model interface."""

    def __init__(self, fn: Callable, name: str = ""):
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "model")

    def run(self, mode: ExecutionMode, seed: int) -> Trace:
        ctx = ExecutionContext(mode, seed)
        try:
            result = self.fn(ctx)
        except (IncompatibleBindingError, ValueTypeError, ModelExecutionError):
            raise
        except Exception as exc:
            raise ModelExecutionError(ctx.addresses(), exc) from exc
        outputs = result if isinstance(result, Mapping) else None
        return ctx.finish(outputs)


def run_model(model, mode: ExecutionMode, seed: int) -> Trace:
    """Run a model (a Model object or a bare ``fn(ctx)`` callable) to a Trace."""
    if hasattr(model, "run"):
        return model.run(mode, seed)
    return FunctionModel(model).run(mode, seed)
