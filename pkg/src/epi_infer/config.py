"""Declarative job configuration: one JSON document per experiment.

The ``model`` section follows the model-configuration schema (also the
payload sent to external simulators in Run messages):

    {"model": "sir" | "ibm", "population": N, "initial_infected": I0,
     "horizon_days": D, "dt": 1.0,
     "priors": {"beta": {"family": ..., "params": {...}}, "gamma": {...}},
     "policy": {"start_day": 0, "contact_reduction": 0.0, "vaccination_coverage": 0.0},
     "icu": {"rho": 0.05, "capacity": 100},
     "data": [{"day": 1, "count": 3}, ...],
     "contacts_per_day": 4, "p_c": null}          # ibm only

A job holds exactly one of ``model`` (built-in) or ``bridge`` (external
simulator; its ``config`` is the same schema, interpreted by the client).
The seed is mandatory: wall-clock defaults are how simulation studies stop
being reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from .distributions import dist_from_json, dist_to_json
from .models import (
    DEFAULT_ICU_RHO,
    DEFAULT_PRIORS,
    ConfigurationError,
    EpiPriors,
    IbmConfig,
    InterventionPolicy,
    ObservationSeries,
    OutcomeConstraint,
    SirConfig,
    ibm_model,
    simulate_ibm,
    simulate_sir,
    sir_model,
)
from .trace import FunctionModel

__all__ = [
    "ModelSpec",
    "NormalBenchConfig",
    "BridgeSettings",
    "InferenceSettings",
    "ScanSettings",
    "JobConfig",
    "model_spec_from_json",
    "load_job_config",
    "parse_job_config",
]


@dataclass(frozen=True)
class NormalBenchConfig:
    """Conjugate-normal calibration benchmark: theta ~ N(m0, s0), y ~ N(theta, s)."""

    prior_mean: float
    prior_std: float
    obs_std: float
    observations: tuple

    def __post_init__(self):
        if self.prior_std <= 0 or self.obs_std <= 0:
            raise ConfigurationError("normal benchmark requires positive std parameters")

    def posterior_mean(self) -> float:
        """Analytic posterior mean (the oracle the benchmark is checked against)."""
        precision = 1.0 / self.prior_std**2 + len(self.observations) / self.obs_std**2
        top = self.prior_mean / self.prior_std**2 + sum(self.observations) / self.obs_std**2
        return top / precision


@dataclass(frozen=True)
class ModelSpec:
    """A fully parsed model section, buildable with or without its data."""

    kind: str
    sir: Optional[SirConfig]
    ibm: Optional[IbmConfig]
    priors: EpiPriors
    policy: InterventionPolicy
    rho: float
    capacity: Optional[int]
    data: Optional[ObservationSeries]
    bench: Optional[NormalBenchConfig] = None

    @property
    def horizon_days(self) -> int:
        return (self.sir or self.ibm).horizon_days

    @property
    def population(self) -> int:
        return (self.sir or self.ibm).population

    def latent_labels(self) -> tuple:
        if self.kind == "sir":
            return ("beta", "gamma")
        if self.kind == "normal":
            return ("theta",)
        return ("p_c", "gamma") if self.ibm.p_c is None else ("gamma",)

    def has_observations(self) -> bool:
        if self.kind == "normal":
            return bool(self.bench.observations)
        return self.data is not None

    def constraint(self) -> OutcomeConstraint:
        if self.capacity is None:
            raise ConfigurationError("icu.capacity is required for event/scan jobs")
        return OutcomeConstraint(self.capacity)

    def build_model(self, with_data: bool = True, policy: Optional[InterventionPolicy] = None):
        if self.kind == "normal":
            bench = self.bench

            def run(ctx):
                _execute_bench(ctx, bench, with_data)

            return FunctionModel(run, name="normal")
        policy = policy if policy is not None else self.policy
        data = self.data if with_data else None
        if self.kind == "sir":
            return sir_model(self.sir, self.priors, policy, data, self.rho)
        return ibm_model(self.ibm, self.priors, policy, data, self.rho)

    def execute(self, ctx) -> dict:
        """Run the simulator body against any context (used by bridge clients)."""
        if self.kind == "normal":
            _execute_bench(ctx, self.bench, True)
        elif self.kind == "sir":
            simulate_sir(ctx, self.sir, self.priors, self.policy, self.data, self.rho)
        else:
            simulate_ibm(ctx, self.ibm, self.priors, self.policy, self.data, self.rho)
        return ctx.outputs if hasattr(ctx, "outputs") else {}

    def to_json(self) -> dict:
        if self.kind == "normal":
            return {
                "model": "normal",
                "prior_mean": self.bench.prior_mean,
                "prior_std": self.bench.prior_std,
                "obs_std": self.bench.obs_std,
                "observations": list(self.bench.observations),
            }
        cfg = self.sir or self.ibm
        obj = {
            "model": self.kind,
            "population": cfg.population,
            "initial_infected": cfg.initial_infected,
            "horizon_days": cfg.horizon_days,
            "dt": cfg.dt,
            "priors": {
                "beta": dist_to_json(self.priors.beta_prior),
                "gamma": dist_to_json(self.priors.gamma_prior),
            },
            "policy": {
                "start_day": self.policy.start_day,
                "contact_reduction": self.policy.contact_reduction,
                "vaccination_coverage": self.policy.vaccination_coverage,
            },
            "icu": {"rho": self.rho, **({"capacity": self.capacity} if self.capacity else {})},
        }
        if self.kind == "ibm":
            obj["contacts_per_day"] = self.ibm.contacts_per_day
            obj["p_c"] = self.ibm.p_c
        if self.data is not None:
            obj["data"] = [{"day": d, "count": c} for d, c in self.data.counts.items()]
        return obj


def _execute_bench(ctx, bench: NormalBenchConfig, with_data: bool) -> None:
    from .distributions import Normal

    theta = ctx.sample("theta", Normal(bench.prior_mean, bench.prior_std))
    if with_data:
        for y in bench.observations:
            ctx.observe("y", Normal(theta, bench.obs_std), y)


_MISSING = object()


def _expect(obj, key: str, kinds, where: str, default=_MISSING):
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where} must be an object")
    if key not in obj:
        if default is not _MISSING:
            return default
        raise ConfigurationError(f"{where}: missing required key {key!r}")
    value = obj[key]
    if kinds is not None and (not isinstance(value, kinds) or isinstance(value, bool)):
        raise ConfigurationError(f"{where}.{key}: wrong type ({type(value).__name__})")
    return value


def _parse_priors(obj, where: str) -> EpiPriors:
    if obj is None:
        return DEFAULT_PRIORS
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where}.priors must be an object")
    try:
        beta = dist_from_json(obj["beta"]) if "beta" in obj else DEFAULT_PRIORS.beta_prior
        gamma = dist_from_json(obj["gamma"]) if "gamma" in obj else DEFAULT_PRIORS.gamma_prior
    except ValueError as exc:
        raise ConfigurationError(f"{where}.priors: {exc}") from exc
    return EpiPriors(beta, gamma)


def _parse_policy(obj, where: str) -> InterventionPolicy:
    if obj is None:
        return InterventionPolicy()
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where}.policy must be an object")
    return InterventionPolicy(
        start_day=_expect(obj, "start_day", int, f"{where}.policy", 0),
        contact_reduction=float(_expect(obj, "contact_reduction", (int, float), f"{where}.policy", 0.0)),
        vaccination_coverage=float(_expect(obj, "vaccination_coverage", (int, float), f"{where}.policy", 0.0)),
    )


def _parse_data(obj, where: str) -> Optional[ObservationSeries]:
    if obj is None:
        return None
    if not isinstance(obj, list):
        raise ConfigurationError(f"{where}.data must be an array of {{day, count}} objects")
    counts = {}
    for item in obj:
        day = _expect(item, "day", int, f"{where}.data[]")
        count = _expect(item, "count", int, f"{where}.data[]")
        if day in counts:
            raise ConfigurationError(f"{where}.data: duplicate day {day}")
        counts[day] = count
    return ObservationSeries(counts)


def model_spec_from_json(obj: dict) -> ModelSpec:
    """Parse (and fully validate) a model-configuration JSON object."""
    if not isinstance(obj, dict):
        raise ConfigurationError("model configuration must be a JSON object")
    where = "model"
    kind = _expect(obj, "model", str, where)
    if kind not in ("sir", "ibm", "normal"):
        raise ConfigurationError(f"unknown model kind {kind!r} (expected 'sir', 'ibm', or 'normal')")
    if kind == "normal":
        observations = _expect(obj, "observations", list, where)
        if not all(isinstance(y, (int, float)) and not isinstance(y, bool) for y in observations):
            raise ConfigurationError(f"{where}.observations must be numbers")
        bench = NormalBenchConfig(
            prior_mean=float(_expect(obj, "prior_mean", (int, float), where, 0.0)),
            prior_std=float(_expect(obj, "prior_std", (int, float), where, 1.0)),
            obs_std=float(_expect(obj, "obs_std", (int, float), where, 1.0)),
            observations=tuple(float(y) for y in observations),
        )
        return ModelSpec(
            kind="normal",
            sir=None,
            ibm=None,
            priors=DEFAULT_PRIORS,
            policy=InterventionPolicy(),
            rho=DEFAULT_ICU_RHO,
            capacity=None,
            data=None,
            bench=bench,
        )
    population = _expect(obj, "population", int, where)
    initial_infected = _expect(obj, "initial_infected", int, where)
    horizon_days = _expect(obj, "horizon_days", int, where)
    dt = float(_expect(obj, "dt", (int, float), where, 1.0))

    icu = obj.get("icu") or {}
    rho = float(_expect(icu, "rho", (int, float), f"{where}.icu", DEFAULT_ICU_RHO))
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"{where}.icu.rho must be in [0, 1], got {rho}")
    capacity = icu.get("capacity")
    if capacity is not None and (isinstance(capacity, bool) or not isinstance(capacity, int)):
        raise ConfigurationError(f"{where}.icu.capacity must be an integer")

    sir = ibm = None
    if kind == "sir":
        sir = SirConfig(population, initial_infected, horizon_days, dt)
    else:
        p_c = obj.get("p_c")
        if p_c is not None and (isinstance(p_c, bool) or not isinstance(p_c, (int, float))):
            raise ConfigurationError(f"{where}.p_c must be a number or null")
        ibm = IbmConfig(
            population,
            initial_infected,
            horizon_days,
            contacts_per_day=_expect(obj, "contacts_per_day", int, where),
            p_c=None if p_c is None else float(p_c),
            dt=dt,
        )

    data = _parse_data(obj.get("data"), where)
    if data is not None and data.max_day() > horizon_days:
        raise ConfigurationError(
            f"{where}.data: day {data.max_day()} is beyond horizon_days={horizon_days}"
        )

    return ModelSpec(
        kind=kind,
        sir=sir,
        ibm=ibm,
        priors=_parse_priors(obj.get("priors"), where),
        policy=_parse_policy(obj.get("policy"), where),
        rho=rho,
        capacity=capacity,
        data=data,
    )


@dataclass(frozen=True)
class BridgeSettings:
    host: str
    port: int
    config: dict  # model-config payload sent verbatim in Run messages
    timeout: float = 300.0
    max_frame: int = 16 * 1024 * 1024


@dataclass(frozen=True)
class InferenceSettings:
    engine: str
    n_particles: int = 1000
    n_steps: int = 10000
    burn_in: int = 1000
    tolerance: float = 1.0
    proposal_budget: int = 10_000_000


@dataclass(frozen=True)
class ScanSettings:
    policies: tuple
    m_rollouts: int
    latent_source: str  # "prior" | "posterior"


@dataclass(frozen=True)
class JobConfig:
    model: Optional[ModelSpec]
    bridge: Optional[BridgeSettings]
    inference: Optional[InferenceSettings]
    scan: Optional[ScanSettings]
    seed: int
    out_dir: Optional[str]
    n_runs: int


def _parse_inference(obj) -> Optional[InferenceSettings]:
    if obj is None:
        return None
    engine = _expect(obj, "engine", str, "inference").lower()
    if engine not in ("is", "lmh", "abc", "event"):
        raise ConfigurationError(f"unknown engine {engine!r} (expected is|lmh|abc|event)")
    tolerance = obj.get("tolerance", 1.0)
    if tolerance == "inf":  # JSON has no literal for +infinity
        tolerance = float("inf")
    if isinstance(tolerance, bool) or not isinstance(tolerance, (int, float)):
        raise ConfigurationError("inference.tolerance must be a number or the string 'inf'")
    settings = InferenceSettings(
        engine=engine,
        n_particles=_expect(obj, "n_particles", int, "inference", 1000),
        n_steps=_expect(obj, "n_steps", int, "inference", 10000),
        burn_in=_expect(obj, "burn_in", int, "inference", 1000),
        tolerance=float(tolerance),
        proposal_budget=_expect(obj, "proposal_budget", int, "inference", 10_000_000),
    )
    if settings.n_particles < 1:
        raise ConfigurationError("inference.n_particles must be >= 1")
    if engine == "lmh" and not 0 <= settings.burn_in < settings.n_steps:
        raise ConfigurationError("inference requires 0 <= burn_in < n_steps")
    return settings


_POLICY_FIELDS = ("start_day", "contact_reduction", "vaccination_coverage")


def _linear_range(spec, where: str) -> list:
    if isinstance(spec, list):
        return list(spec)
    if isinstance(spec, dict):
        start = _expect(spec, "start", (int, float), where)
        stop = _expect(spec, "stop", (int, float), where)
        count = _expect(spec, "count", int, where)
        if count < 1:
            raise ConfigurationError(f"{where}.count must be >= 1")
        if count == 1:
            return [start]
        step = (stop - start) / (count - 1)
        return [start + i * step for i in range(count)]
    raise ConfigurationError(f"{where} must be a list of values or a start/stop/count object")


def _parse_scan(obj) -> Optional[ScanSettings]:
    if obj is None:
        return None
    m_rollouts = _expect(obj, "m_rollouts", int, "scan", 100)
    latent_source = _expect(obj, "latent_source", str, "scan", "prior").lower()
    if latent_source not in ("prior", "posterior"):
        raise ConfigurationError("scan.latent_source must be 'prior' or 'posterior'")

    policies = []
    if "policies" in obj:
        for raw in _expect(obj, "policies", list, "scan"):
            policies.append(_parse_policy(raw, "scan"))
    elif "ranges" in obj:
        ranges = _expect(obj, "ranges", dict, "scan")
        unknown = set(ranges) - set(_POLICY_FIELDS)
        if unknown:
            raise ConfigurationError(f"scan.ranges: unknown field(s) {sorted(unknown)}")
        axes = []
        for name in _POLICY_FIELDS:
            if name in ranges:
                axes.append([(name, v) for v in _linear_range(ranges[name], f"scan.ranges.{name}")])
            else:
                axes.append([(name, 0 if name == "start_day" else 0.0)])
        stack = [dict()]
        for axis in axes:
            stack = [dict(d, **{k: v}) for d in stack for (k, v) in axis]
        for combo in stack:
            policies.append(
                InterventionPolicy(
                    start_day=int(combo["start_day"]),
                    contact_reduction=float(combo["contact_reduction"]),
                    vaccination_coverage=float(combo["vaccination_coverage"]),
                )
            )
    if not policies:
        raise ConfigurationError("scan: policy grid is empty (need 'policies' or 'ranges')")
    return ScanSettings(policies=tuple(policies), m_rollouts=m_rollouts, latent_source=latent_source)


def _parse_bridge(obj) -> Optional[BridgeSettings]:
    if obj is None:
        return None
    listen = _expect(obj, "listen", str, "bridge")
    host, _, port_text = listen.rpartition(":")
    if not host or not port_text.isdigit():
        raise ConfigurationError(f"bridge.listen must be 'host:port', got {listen!r}")
    config = _expect(obj, "config", dict, "bridge")
    # Validate the payload against the shared schema so controller-side
    # slices (data, icu) are trustworthy, while sending it verbatim.
    model_spec_from_json(config)
    max_frame = _expect(obj, "max_frame_bytes", int, "bridge", 16 * 1024 * 1024)
    if max_frame < 64:
        raise ConfigurationError("bridge.max_frame_bytes is unusably small")
    return BridgeSettings(
        host=host,
        port=int(port_text),
        config=config,
        timeout=float(_expect(obj, "timeout", (int, float), "bridge", 300.0)),
        max_frame=max_frame,
    )


def parse_job_config(obj: dict) -> JobConfig:
    if not isinstance(obj, dict):
        raise ConfigurationError("job configuration must be a JSON object")
    io = obj.get("io")
    if not isinstance(io, dict):
        raise ConfigurationError("io section with a mandatory seed is required")
    seed = _expect(io, "seed", int, "io")
    if not 0 <= seed < 2**64:
        raise ConfigurationError(f"io.seed must fit in 64 bits, got {seed}")
    n_runs = _expect(io, "n_runs", int, "io", 1)
    if n_runs < 1:
        raise ConfigurationError("io.n_runs must be >= 1")

    model_obj = obj.get("model")
    bridge_obj = obj.get("bridge")
    if (model_obj is None) == (bridge_obj is None):
        raise ConfigurationError("exactly one of 'model' or 'bridge' must be present")

    return JobConfig(
        model=model_spec_from_json(model_obj) if model_obj is not None else None,
        bridge=_parse_bridge(bridge_obj),
        inference=_parse_inference(obj.get("inference")),
        scan=_parse_scan(obj.get("scan")),
        seed=seed,
        out_dir=_expect(io, "out_dir", str, "io", None),
        n_runs=n_runs,
    )


def load_job_config(path) -> JobConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_job_config(obj)
