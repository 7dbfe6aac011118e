"""Built-in stochastic epidemic simulators written against the execution context.

Two models are provided:

* ``simulate_sir``: a daily chain-binomial SIR. New infections per step are
  Binomial(S, 1 - exp(-beta_eff * I * dt / N)) and recoveries are
  Binomial(I, 1 - exp(-gamma * dt)), both drawn from the pre-step state, so
  an individual is infectious for at least one full day. The exponential
  hazard keeps both probabilities in [0, 1] for any parameter values.

* ``simulate_ibm``: an individual-based model. Each infectious agent draws a
  fixed number of uniform-random contacts per day (with replacement,
  self-contacts allowed and wasted) and infects susceptible contacts with a
  per-contact Bernoulli. Recovery is a per-agent daily Bernoulli with the
  same exponential hazard as the SIR.

Both support intervention policies (contact reduction from a start day,
all-or-nothing vaccination applied at day 0), optional case-count
observations (Poisson noise with a +0.1 rate floor), and an ICU occupancy
proxy (a fixed fraction of current infectious, rounded half away from zero).

Every random decision flows through ``ctx.sample``; the simulators consume
no other randomness, so full-redirect replay reproduces a run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .distributions import Bernoulli, Binomial, Distribution, Poisson, Uniform
from .trace import ExecutionContext, FunctionModel

__all__ = [
    "ConfigurationError",
    "SirConfig",
    "IbmConfig",
    "EpiPriors",
    "InterventionPolicy",
    "EpidemicPath",
    "ObservationSeries",
    "OutcomeConstraint",
    "DEFAULT_PRIORS",
    "DEFAULT_ICU_RHO",
    "round_half_up",
    "reed_frost_step",
    "simulate_sir",
    "simulate_ibm",
    "icu_series",
    "constraint_satisfied",
    "final_size_oracle",
    "path_summary_outputs",
    "sir_model",
    "ibm_model",
    "matched_ibm_transmission",
]

DEFAULT_ICU_RHO = 0.05


class ConfigurationError(ValueError):
    """Invalid model/job configuration (reported distinctly from runtime errors)."""


def round_half_up(x: float) -> int:
    """Round a non-negative real half away from zero (0.5 -> 1, 1.85*... -> 2)."""
    return int(math.floor(x + 0.5))


# Families whose support lies within the non-negative reals. Uniform
# qualifies when its lower bound is >= 0.
def _has_positive_support(dist: Distribution) -> bool:
    from .distributions import Beta, Gamma, LogNormal

    if isinstance(dist, (LogNormal, Gamma, Beta)):
        return True
    if isinstance(dist, Uniform):
        return dist.low >= 0.0
    return False


@dataclass(frozen=True)
class SirConfig:
    """Chain-binomial SIR run parameters.

    population: total population N.
    initial_infected: infectious individuals at day 0 (1 <= I0 <= N).
    horizon_days: number of daily steps to simulate (series have length
        horizon_days + 1, day 0 being the initial state).
    dt: step length in days (default 1.0).
    """

    population: int
    initial_infected: int
    horizon_days: int
    dt: float = 1.0

    def __post_init__(self):
        if self.population < 1:
            raise ConfigurationError(f"population must be positive, got {self.population}")
        if not 1 <= self.initial_infected <= self.population:
            raise ConfigurationError(
                f"initial_infected must be in [1, population], got {self.initial_infected}"
            )
        if self.horizon_days < 0:
            raise ConfigurationError(f"horizon_days must be >= 0, got {self.horizon_days}")
        if not (isinstance(self.dt, (int, float)) and self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigurationError(f"dt must be a positive real, got {self.dt}")
        object.__setattr__(self, "dt", float(self.dt))


@dataclass(frozen=True)
class IbmConfig:
    """Individual-based model parameters.

    contacts_per_day: contacts drawn per infectious agent per day (k >= 1).
    p_c: per-contact transmission probability; None makes it a latent drawn
        from the transmission prior at label "p_c".
    """

    population: int
    initial_infected: int
    horizon_days: int
    contacts_per_day: int
    p_c: Optional[float] = None
    dt: float = 1.0

    def __post_init__(self):
        SirConfig(self.population, self.initial_infected, self.horizon_days, self.dt)
        object.__setattr__(self, "dt", float(self.dt))
        if self.contacts_per_day < 1:
            raise ConfigurationError(f"contacts_per_day must be >= 1, got {self.contacts_per_day}")
        if self.p_c is not None:
            if not 0.0 <= self.p_c <= 1.0:
                raise ConfigurationError(f"p_c must be in [0, 1], got {self.p_c}")
            object.__setattr__(self, "p_c", float(self.p_c))


@dataclass(frozen=True)
class EpiPriors:
    """Priors over the calibration latents (both must have positive-real support)."""

    beta_prior: Distribution
    gamma_prior: Distribution

    def __post_init__(self):
        for name, dist in (("beta_prior", self.beta_prior), ("gamma_prior", self.gamma_prior)):
            if not _has_positive_support(dist):
                raise ConfigurationError(
                    f"{name} must have support within the positive reals, got {dist.family}"
                )


DEFAULT_PRIORS = EpiPriors(Uniform(0.05, 1.0), Uniform(0.05, 0.5))


@dataclass(frozen=True)
class InterventionPolicy:
    """A containment portfolio: contact reduction from start_day, vaccination at day 0."""

    start_day: int = 0
    contact_reduction: float = 0.0
    vaccination_coverage: float = 0.0

    def __post_init__(self):
        if self.start_day < 0:
            raise ConfigurationError(f"start_day must be >= 0, got {self.start_day}")
        for name in ("contact_reduction", "vaccination_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
            object.__setattr__(self, name, float(v))

    def sort_key(self):
        return (self.start_day, self.contact_reduction, self.vaccination_coverage)


@dataclass(frozen=True)
class ObservationSeries:
    """Observed case counts, day -> count, days within [1, horizon_days]."""

    counts: Mapping[int, int]

    def __post_init__(self):
        counts = {}
        for day, count in self.counts.items():
            if not isinstance(day, int) or isinstance(day, bool) or day < 1:
                raise ConfigurationError(f"observation day must be an integer >= 1, got {day!r}")
            if not isinstance(count, int) or isinstance(count, bool) or count < 0:
                raise ConfigurationError(f"observed count must be a non-negative integer, got {count!r}")
            counts[day] = count
        if not counts:
            raise ConfigurationError("observation series must not be empty")
        object.__setattr__(self, "counts", dict(sorted(counts.items())))

    def days(self):
        return tuple(self.counts)

    def max_day(self) -> int:
        return max(self.counts)


@dataclass(frozen=True)
class OutcomeConstraint:
    """Health-outcome event: peak ICU occupancy must not exceed capacity."""

    icu_capacity: int

    def __post_init__(self):
        if self.icu_capacity < 1:
            raise ConfigurationError(f"icu_capacity must be positive, got {self.icu_capacity}")


@dataclass(frozen=True)
class EpidemicPath:
    """Per-day compartment series plus incidence and ICU occupancy.

    All five series have length horizon_days + 1; index 0 is the initial
    state (new_infections[0] == 0 by convention).
    """

    s: tuple
    i: tuple
    r: tuple
    new_infections: tuple
    icu: tuple

    def __post_init__(self):
        n_days = len(self.s)
        if not (len(self.i) == len(self.r) == len(self.new_infections) == len(self.icu) == n_days):
            raise ValueError("path series must share one length")
        population = self.s[0] + self.i[0] + self.r[0]
        for t in range(n_days):
            if min(self.s[t], self.i[t], self.r[t], self.new_infections[t], self.icu[t]) < 0:
                raise ValueError(f"negative series entry at day {t}")
            if self.s[t] + self.i[t] + self.r[t] != population:
                raise ValueError(f"S+I+R != N at day {t}")
            if t > 0 and self.s[t] > self.s[t - 1]:
                raise ValueError(f"S increased at day {t}")

    @property
    def population(self) -> int:
        return self.s[0] + self.i[0] + self.r[0]

    @property
    def total_cases(self) -> int:
        """Infections acquired during the run (the initial infected are not counted)."""
        return sum(self.new_infections)

    def incidence_peak(self) -> tuple[int, int]:
        """(peak_day, peak_height) of the new-infection series; first day wins ties."""
        peak_height = max(self.new_infections)
        peak_day = self.new_infections.index(peak_height)
        return peak_day, peak_height


def icu_series(path: EpidemicPath, rho: float) -> tuple:
    """ICU occupancy proxy: round(rho * I_t), half away from zero, per day."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"rho must be in [0, 1], got {rho}")
    return tuple(round_half_up(rho * i) for i in path.i)


def constraint_satisfied(path: EpidemicPath, constraint: OutcomeConstraint, rho: float) -> bool:
    """True iff peak ICU occupancy stays within capacity for the whole path."""
    return max(icu_series(path, rho)) <= constraint.icu_capacity


def reed_frost_step(s, i, r, beta_eff, gamma, dt, population, ctx):
    """One chain-binomial day step; returns (s', i', r', new_infections).

    Infection and recovery draws both use the pre-step state, so the two
    binomials commute and S' + I' + R' == N by construction.
    """
    if s + i + r != population:
        raise ValueError(f"S+I+R must equal N before a step ({s}+{i}+{r} != {population})")
    p_inf = -math.expm1(-beta_eff * i * dt / population)
    new_infections = ctx.sample("step_inf", Binomial(s, p_inf))
    p_rec = -math.expm1(-gamma * dt)
    recoveries = ctx.sample("step_rec", Binomial(i, p_rec))
    return s - new_infections, i + new_infections - recoveries, r + recoveries, new_infections


def _validate_data(data: Optional[ObservationSeries], horizon_days: int) -> None:
    if data is not None and data.max_day() > horizon_days:
        raise ConfigurationError(
            f"observation day {data.max_day()} is beyond horizon_days={horizon_days}"
        )


def _observe_day(ctx, data, day, new_infections) -> None:
    # Poisson rate floored at 0.1 so a zero-incidence day cannot zero out the
    # likelihood of a positive observed count.
    if data is not None and day in data.counts:
        ctx.observe("obs", Poisson(new_infections + 0.1), data.counts[day])


def path_summary_outputs(path: EpidemicPath, rho: float) -> dict:
    """Named outputs shared by both models: curve-shape stats plus the ICU
    and incidence series (vectors; CSV exports carry the scalars only)."""
    peak_day, peak_height = path.incidence_peak()
    return {
        "total_cases": path.total_cases,
        "peak_day": peak_day,
        "peak_height": peak_height,
        "icu": tuple(float(x) for x in icu_series(path, rho)),
        "new_infections": tuple(float(x) for x in path.new_infections),
    }


def simulate_sir(
    ctx: ExecutionContext,
    config: SirConfig,
    priors: EpiPriors = DEFAULT_PRIORS,
    policy: InterventionPolicy = InterventionPolicy(),
    data: Optional[ObservationSeries] = None,
    rho: float = DEFAULT_ICU_RHO,
) -> EpidemicPath:
    """Run the chain-binomial SIR as a probabilistic program.

    Samples the transmission rate at label "beta" and the recovery rate at
    "gamma". Contact reduction scales beta from policy.start_day onward
    (the step advancing day d to d+1 uses the rate in force on day d);
    vaccination moves round(v * (N - I0)) susceptibles to R at day 0. When
    ``data`` is present, each observed day conditions the run with
    ctx.observe("obs", Poisson(new_infections + 0.1), count).

    Returns the EpidemicPath and records outputs total_cases, peak_day,
    peak_height, and the ICU series on the trace.
    """
    _validate_data(data, config.horizon_days)
    beta = ctx.sample("beta", priors.beta_prior)
    gamma = ctx.sample("gamma", priors.gamma_prior)

    population = config.population
    vaccinated = round_half_up(policy.vaccination_coverage * (population - config.initial_infected))
    s = population - config.initial_infected - vaccinated
    i = config.initial_infected
    r = vaccinated

    s_series, i_series, r_series, new_series = [s], [i], [r], [0]
    for day in range(config.horizon_days):
        reduction = policy.contact_reduction if day >= policy.start_day else 0.0
        beta_eff = beta * (1.0 - reduction)
        s, i, r, new_infections = reed_frost_step(
            s, i, r, beta_eff, gamma, config.dt, population, ctx
        )
        s_series.append(s)
        i_series.append(i)
        r_series.append(r)
        new_series.append(new_infections)
        _observe_day(ctx, data, day + 1, new_infections)

    path = EpidemicPath(
        s=tuple(s_series),
        i=tuple(i_series),
        r=tuple(r_series),
        new_infections=tuple(new_series),
        icu=icu_series_from_infectious(i_series, rho),
    )
    for name, value in path_summary_outputs(path, rho).items():
        ctx.set_output(name, value)
    return path


def icu_series_from_infectious(i_series, rho: float) -> tuple:
    return tuple(round_half_up(rho * i) for i in i_series)


_S, _I, _R = 0, 1, 2


def simulate_ibm(
    ctx: ExecutionContext,
    config: IbmConfig,
    priors: EpiPriors = DEFAULT_PRIORS,
    policy: InterventionPolicy = InterventionPolicy(),
    data: Optional[ObservationSeries] = None,
    rho: float = DEFAULT_ICU_RHO,
) -> EpidemicPath:
    """Run the individual-based model as a probabilistic program.

    Agents 0..I0-1 start infectious. Vaccinated agents are chosen uniformly
    without replacement from the susceptibles via Uniform draws at label
    "vax". Per day, each infectious agent (ascending index) draws
    contacts_per_day uniform contacts at label "contact" (a Uniform(0, N)
    real floored to an agent index); a susceptible contact is infected via
    Bernoulli(p_c * (1 - c(t))) at label "infect" and leaves the susceptible
    pool immediately. Recovery draws happen after the contact phase, at
    label "recover", over the agents that were infectious at the start of
    the day. Newly infected agents become infectious the next day.
    """
    _validate_data(data, config.horizon_days)
    population = config.population

    if config.p_c is None:
        p_c = ctx.sample("p_c", priors.beta_prior)
        if not 0.0 <= p_c <= 1.0:
            raise ConfigurationError(
                f"latent p_c drawn outside [0, 1] ({p_c}); use a prior supported on [0, 1]"
            )
    else:
        p_c = config.p_c
    gamma = ctx.sample("gamma", priors.gamma_prior)
    p_rec = -math.expm1(-gamma * config.dt)
    recover_dist = Bernoulli(p_rec)
    contact_dist = Uniform(0.0, float(population))

    states = np.full(population, _S, dtype=np.int8)
    states[: config.initial_infected] = _I

    vaccinated = round_half_up(
        policy.vaccination_coverage * (population - config.initial_infected)
    )
    pool = list(range(config.initial_infected, population))
    for _ in range(vaccinated):
        u = ctx.sample("vax", Uniform(0.0, float(len(pool))))
        chosen = pool.pop(min(int(u), len(pool) - 1))
        states[chosen] = _R

    def tally():
        counts = np.bincount(states, minlength=3)
        return int(counts[_S]), int(counts[_I]), int(counts[_R])

    s0, i0, r0 = tally()
    s_series, i_series, r_series, new_series = [s0], [i0], [r0], [0]

    for day in range(config.horizon_days):
        reduction = policy.contact_reduction if day >= policy.start_day else 0.0
        infect_dist = Bernoulli(p_c * (1.0 - reduction))
        infectious = np.flatnonzero(states == _I)
        newly_infected = []
        for _agent in infectious:
            for _ in range(config.contacts_per_day):
                u = ctx.sample("contact", contact_dist)
                target = min(int(u), population - 1)
                if states[target] == _S and ctx.sample("infect", infect_dist):
                    states[target] = 3  # pending: infected today, infectious tomorrow
                    newly_infected.append(target)
        for agent in infectious:
            if ctx.sample("recover", recover_dist):
                states[agent] = _R
        for agent in newly_infected:
            states[agent] = _I

        s, i, r = tally()
        s_series.append(s)
        i_series.append(i)
        r_series.append(r)
        new_series.append(len(newly_infected))
        _observe_day(ctx, data, day + 1, len(newly_infected))

    path = EpidemicPath(
        s=tuple(s_series),
        i=tuple(i_series),
        r=tuple(r_series),
        new_infections=tuple(new_series),
        icu=icu_series_from_infectious(i_series, rho),
    )
    for name, value in path_summary_outputs(path, rho).items():
        ctx.set_output(name, value)
    return path


def final_size_oracle(r0: float) -> float:
    """Final epidemic size z solving z = 1 - exp(-R0 z); 0 for R0 <= 1.

    Fixed-point iteration from z = 0.99 to absolute tolerance 1e-10. Used as
    the independent oracle for the attack-rate checks.
    """
    if r0 <= 0:
        raise ValueError(f"R0 must be positive, got {r0}")
    if r0 <= 1.0:
        return 0.0
    z = 0.99
    for _ in range(100000):
        z_next = -math.expm1(-r0 * z)
        if abs(z_next - z) < 1e-10:
            return z_next
        z = z_next
    return z


def matched_ibm_transmission(beta: float, contacts_per_day: int, population: int) -> float:
    """Per-contact probability giving the IBM the same per-day escape
    probability as the SIR hazard: (1 - p_c/N)^(k I) == exp(-beta I / N)."""
    k, n = contacts_per_day, population
    return -n * math.expm1(-beta / (k * n))


def sir_model(
    config: SirConfig,
    priors: EpiPriors = DEFAULT_PRIORS,
    policy: InterventionPolicy = InterventionPolicy(),
    data: Optional[ObservationSeries] = None,
    rho: float = DEFAULT_ICU_RHO,
) -> FunctionModel:
    """Package the SIR as a runnable model with its configuration baked in."""

    def run(ctx):
        simulate_sir(ctx, config, priors, policy, data, rho)

    return FunctionModel(run, name="sir")


def ibm_model(
    config: IbmConfig,
    priors: EpiPriors = DEFAULT_PRIORS,
    policy: InterventionPolicy = InterventionPolicy(),
    data: Optional[ObservationSeries] = None,
    rho: float = DEFAULT_ICU_RHO,
) -> FunctionModel:
    """Package the IBM as a runnable model with its configuration baked in."""

    def run(ctx):
        simulate_ibm(ctx, config, priors, policy, data, rho)

    return FunctionModel(run, name="ibm")
