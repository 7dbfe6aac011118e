"""Inference engines over traced models.

Engines never look inside a model: they run it under Record or Redirect
modes and work with the resulting traces, so a simulator attached over the
wire protocol behaves identically to a built-in one.

* ``run_is``: importance sampling with the prior as proposal; a particle's
  log weight is its trace log-likelihood.
* ``run_lmh``: lightweight single-site Metropolis-Hastings. Each step picks
  one sample entry uniformly, proposes a fresh value from its recorded
  distribution, and re-executes the model with every other old choice
  redirected. The acceptance ratio is the standard one for structurally
  changing traces:

      log a = (log_joint' - log_joint) + ln|x| - ln|x'|
              + (ln g_site(v_old) - ln g_site(v_new))
              + l_stale - l_fresh

  where |x| counts sample entries, l_fresh sums the log-probs of entries
  freshly sampled in the proposed trace (address absent from the old trace,
  or its old value no longer in support; the proposal site excluded), and
  l_stale sums the old log-probs of entries absent from the proposed trace.
* ``run_abc``: rejection ABC on summary statistics (total cases, peak day,
  peak height of the incidence curve), with a per-component normalized
  Euclidean distance.
* ``run_conditioned_event``: importance sampling with hard indicator
  weights for an ICU-capacity outcome event.
* ``scan_policies``: Monte Carlo evaluation of an intervention-policy grid
  under prior or posterior latents.

All engines are deterministic functions of their seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .distributions import Value
from .models import InterventionPolicy, ObservationSeries, OutcomeConstraint
from .trace import Address, Record, Redirect, Trace, derive_seed

__all__ = [
    "Particle",
    "Posterior",
    "SummaryStats",
    "PolicyScanRow",
    "PolicyScanResult",
    "DegeneratePosteriorError",
    "ToleranceTooTightError",
    "InitializationError",
    "run_is",
    "run_lmh",
    "run_abc",
    "run_conditioned_event",
    "ess",
    "posterior_mean",
    "posterior_quantile",
    "scan_policies",
    "summary_stats_from_outputs",
    "summary_stats_from_data",
    "summary_stats_from_series",
    "abc_distance",
    "ABC_PROPOSAL_BUDGET",
]

ABC_PROPOSAL_BUDGET = 10_000_000


class DegeneratePosteriorError(RuntimeError):
    """Every particle carries zero weight (data/event impossible under the prior)."""

    def __init__(self, message: str, min_icu_peak: Optional[float] = None):
        self.min_icu_peak = min_icu_peak
        super().__init__(message)


class ToleranceTooTightError(RuntimeError):
    """ABC exhausted its proposal budget; carries the smallest distance seen."""

    def __init__(self, min_distance: float, proposals: int, accepted: int):
        self.min_distance = min_distance
        self.proposals = proposals
        self.accepted = accepted
        super().__init__(
            f"ABC accepted {accepted} particle(s) in {proposals} proposals; "
            f"smallest observed distance {min_distance:.6g}"
        )


class InitializationError(RuntimeError):
    """No finite-log-joint starting trace found for the MCMC chain."""


@dataclass(frozen=True)
class Particle:
    latents: dict
    outputs: dict
    log_weight: float


@dataclass(frozen=True)
class Posterior:
    """Weighted collection of latent assignments and model outputs."""

    particles: tuple
    engine: str
    seed: int
    n_proposals: Optional[int] = None

    def __post_init__(self):
        if not self.particles:
            raise DegeneratePosteriorError("posterior must contain at least one particle")
        if all(p.log_weight == -math.inf for p in self.particles):
            raise DegeneratePosteriorError("all particles have zero weight")

    def log_weights(self) -> list[float]:
        return [p.log_weight for p in self.particles]


# Summary statistics are a fixed-order vector over the incidence curve.
SummaryStats = tuple  # (total_cases, peak_day, peak_height)


def summary_stats_from_outputs(outputs) -> SummaryStats:
    try:
        return (outputs["total_cases"], outputs["peak_day"], outputs["peak_height"])
    except KeyError as exc:
        raise KeyError(f"model outputs missing summary statistic {exc}") from exc


def summary_stats_from_series(series: dict) -> SummaryStats:
    """Stats of a day -> count map; peak_day is the earliest day with the max."""
    total = sum(series.values())
    peak_height = max(series.values())
    peak_day = min(day for day, count in series.items() if count == peak_height)
    return (total, peak_day, peak_height)


def summary_stats_from_data(data: ObservationSeries) -> SummaryStats:
    """Stats of an observed series, treating counts as the new-infection series."""
    return summary_stats_from_series(data.counts)


def abc_distance(simulated: SummaryStats, observed: SummaryStats) -> float:
    """Euclidean distance with each component scaled by max(|observed_i|, 1)."""
    acc = 0.0
    for s, o in zip(simulated, observed):
        scale = max(abs(o), 1.0)
        acc += ((s - o) / scale) ** 2
    return math.sqrt(acc)


def _particle_from_trace(trace: Trace, log_weight: float) -> Particle:
    return Particle(latents=trace.latents(), outputs=dict(trace.outputs), log_weight=log_weight)


def run_is(model, n_particles: int, seed: int) -> Posterior:
    """Importance sampling: n independent Record runs weighted by likelihood."""
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    particles = []
    for i in range(n_particles):
        trace = model.run(Record(), derive_seed(seed, i))
        particles.append(_particle_from_trace(trace, trace.log_likelihood))
    if all(p.log_weight == -math.inf for p in particles):
        raise DegeneratePosteriorError(
            "importance sampling produced only zero-weight particles "
            "(observations impossible under the prior support)"
        )
    return Posterior(particles=tuple(particles), engine="is", seed=seed)


def _normalized_weights(log_weights: Sequence[float]) -> np.ndarray:
    finite = [lw for lw in log_weights if lw > -math.inf]
    if not finite:
        raise DegeneratePosteriorError("no finite-weight particles")
    top = max(finite)
    w = np.array([math.exp(lw - top) if lw > -math.inf else 0.0 for lw in log_weights])
    return w / w.sum()


def ess(posterior: Posterior) -> float:
    """Effective sample size (sum w)^2 / sum w^2 over normalized weights."""
    w = _normalized_weights(posterior.log_weights())
    return float(1.0 / np.sum(w * w))


def posterior_mean(posterior: Posterior, label: str) -> float:
    """Weighted posterior mean of a latent label."""
    w = _normalized_weights(posterior.log_weights())
    values = np.array([_latent_value(p, label) for p in posterior.particles], dtype=float)
    return float(np.dot(w, values))


def posterior_quantile(posterior: Posterior, label: str, q: float) -> float:
    """Weighted empirical quantile: the value at the first particle (sorted
    ascending by value) whose cumulative normalized weight reaches q."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in (0, 1), got {q}")
    w = _normalized_weights(posterior.log_weights())
    values = np.array([_latent_value(p, label) for p in posterior.particles], dtype=float)
    order = np.argsort(values, kind="stable")
    cumulative = 0.0
    for idx in order:
        cumulative += w[idx]
        if cumulative >= q:
            return float(values[idx])
    return float(values[order[-1]])  # q ~ 1 with rounding shortfall


def _latent_value(particle: Particle, label: str) -> float:
    if label not in particle.latents:
        raise KeyError(f"latent label {label!r} missing from particle")
    v = particle.latents[label]
    if isinstance(v, bool):
        return 1.0 if v else 0.0
    if isinstance(v, (int, float)):
        return float(v)
    raise TypeError(f"latent {label!r} is not scalar: {v!r}")


def _values_identical(a: Value, b: Value) -> bool:
    return type(a) is type(b) and a == b


def run_lmh(
    model,
    n_steps: int,
    burn_in: int,
    seed: int,
    max_init_retries: int = 100,
) -> Posterior:
    """Single-site lightweight Metropolis-Hastings over execution traces.

    Emits one equally weighted particle per post-burn-in step. The proposed
    trace reuses every old choice it can (bindings on all old addresses,
    with the chosen site overridden by a fresh prior draw); choices whose
    old value no longer fits are resampled and enter the fresh set of the
    acceptance ratio.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not 0 <= burn_in < n_steps:
        raise ValueError(f"burn_in must be in [0, n_steps), got {burn_in}")

    chain_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 0)))
    init_base = derive_seed(seed, 1)
    step_base = derive_seed(seed, 2)

    trace = None
    for attempt in range(max_init_retries):
        candidate = model.run(Record(), derive_seed(init_base, attempt))
        if candidate.log_joint > -math.inf:
            trace = candidate
            break
    if trace is None:
        raise InitializationError(
            f"no finite-log-joint initial trace in {max_init_retries} attempts"
        )

    particles = []
    for step in range(n_steps):
        samples = trace.sample_entries()
        if samples:
            site = samples[int(chain_rng.integers(0, len(samples)))]
            proposed_value = site.dist.sample(chain_rng)

            bindings = {e.address: e.value for e in samples}
            bindings[site.address] = proposed_value
            proposal = model.run(
                Redirect(bindings, resample_incompatible=True),
                derive_seed(step_base, step),
            )
            new_samples = proposal.sample_entries()

            # Freshly sampled: address unbound, or bound value rejected as
            # incompatible (in which case the recorded value cannot equal the
            # binding: one is in support, the other is not). The proposal site
            # is bound to proposed_value, so it never counts as fresh.
            log_fresh = 0.0
            new_addresses = set()
            for e in new_samples:
                new_addresses.add(e.address)
                bound = bindings.get(e.address)
                if bound is None or not _values_identical(e.value, bound):
                    log_fresh += e.log_prob
            log_stale = sum(e.log_prob for e in samples if e.address not in new_addresses)

            log_alpha = (
                proposal.log_joint
                - trace.log_joint
                + math.log(len(samples))
                - math.log(len(new_samples))
                + site.dist.log_prob(site.value)
                - site.dist.log_prob(proposed_value)
                + log_stale
                - log_fresh
            )
            if log_alpha >= 0.0 or chain_rng.random() < math.exp(log_alpha):
                trace = proposal
        if step >= burn_in:
            particles.append(_particle_from_trace(trace, 0.0))

    return Posterior(particles=tuple(particles), engine="lmh", seed=seed)


def run_abc(
    model,
    data: ObservationSeries,
    n_particles: int,
    tolerance: float,
    seed: int,
    proposal_budget: int = ABC_PROPOSAL_BUDGET,
) -> Posterior:
    """Rejection ABC: accept prior simulations whose summary statistics land
    within ``tolerance`` of the observed statistics.

    ``model`` must be built without observe statements (likelihood-free).
    Simulated statistics are taken over the simulated incidence at the
    observed days (the models expose it as the "new_infections" output);
    when data covers every day this equals the whole-path statistics. A
    model without that output (e.g. a minimal bridged simulator) falls back
    to its scalar total_cases / peak_day / peak_height outputs.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    observed = summary_stats_from_data(data)
    days = tuple(data.counts)

    particles = []
    proposals = 0
    min_distance = math.inf
    while len(particles) < n_particles:
        if proposals >= proposal_budget:
            raise ToleranceTooTightError(min_distance, proposals, len(particles))
        trace = model.run(Record(), derive_seed(seed, proposals))
        proposals += 1
        incidence = trace.outputs.get("new_infections")
        if incidence is not None:
            simulated = summary_stats_from_series({d: incidence[d] for d in days})
        else:
            simulated = summary_stats_from_outputs(trace.outputs)
        distance = abc_distance(simulated, observed)
        min_distance = min(min_distance, distance)
        if distance <= tolerance:
            particles.append(_particle_from_trace(trace, 0.0))
    return Posterior(
        particles=tuple(particles), engine="abc", seed=seed, n_proposals=proposals
    )


def run_conditioned_event(
    model,
    constraint: OutcomeConstraint,
    n_particles: int,
    seed: int,
) -> Posterior:
    """Importance sampling with hard indicator weights for the ICU event.

    A particle gets log weight 0 when its ICU series peak stays within
    capacity and -inf otherwise. Zero acceptances raise a degenerate
    posterior error carrying the smallest ICU peak achieved, which tells the
    caller how far the event was from feasible.
    """
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    particles = []
    min_peak = math.inf
    accepted = 0
    for i in range(n_particles):
        trace = model.run(Record(), derive_seed(seed, i))
        icu = trace.outputs.get("icu")
        if icu is None:
            raise KeyError("model outputs carry no 'icu' series; cannot evaluate the event")
        peak = max(icu)
        min_peak = min(min_peak, peak)
        satisfied = peak <= constraint.icu_capacity
        accepted += satisfied
        particles.append(_particle_from_trace(trace, 0.0 if satisfied else -math.inf))
    if accepted == 0:
        raise DegeneratePosteriorError(
            f"event ICU peak <= {constraint.icu_capacity} never occurred in "
            f"{n_particles} runs (minimum achieved peak: {min_peak:g})",
            min_icu_peak=min_peak,
        )
    return Posterior(particles=tuple(particles), engine="event", seed=seed)


@dataclass(frozen=True)
class PolicyScanRow:
    policy: InterventionPolicy
    p_constraint: float
    mean_total_cases: float
    n_rollouts: int


@dataclass(frozen=True)
class PolicyScanResult:
    """Rows sorted by p_constraint desc, then mean cases asc, then policy order."""

    rows: tuple

    def __post_init__(self):
        keys = [_row_sort_key(r) for r in self.rows]
        if keys != sorted(keys):
            raise ValueError("scan rows are not in canonical order")


def _row_sort_key(row: PolicyScanRow):
    return (-row.p_constraint, row.mean_total_cases, row.policy.sort_key())


def scan_policies(
    model_factory,
    policy_grid: Sequence[InterventionPolicy],
    m_rollouts: int,
    constraint: OutcomeConstraint,
    seed: int,
    latent_source: Optional[Posterior] = None,
    latent_labels: Sequence[str] = ("beta", "gamma"),
) -> PolicyScanResult:
    """Estimate constraint probability and mean cases for each policy.

    ``model_factory(policy)`` must return an observe-free model. With
    ``latent_source`` set, each rollout resamples a posterior particle
    (proportionally to weight) and redirects the listed latent labels
    (instance 0) to its values; step-level noise is drawn fresh. Without it,
    latents come from the priors inside the model.
    """
    if not policy_grid:
        raise ValueError("policy grid must not be empty")
    if m_rollouts < 1:
        raise ValueError(f"m_rollouts must be >= 1, got {m_rollouts}")

    weights = None
    if latent_source is not None:
        weights = _normalized_weights(latent_source.log_weights())

    rows = []
    for p_index, policy in enumerate(policy_grid):
        model = model_factory(policy)
        policy_seed = derive_seed(seed, p_index)
        pick_rng = np.random.Generator(np.random.PCG64(derive_seed(policy_seed, 0)))
        roll_base = derive_seed(policy_seed, 1)

        satisfied = 0
        total_cases = 0.0
        for r in range(m_rollouts):
            if latent_source is None:
                mode = Record()
            else:
                particle = latent_source.particles[_weighted_index(pick_rng, weights)]
                bindings = {}
                for label in latent_labels:
                    if label in particle.latents:
                        bindings[Address(label, 0)] = particle.latents[label]
                mode = Redirect(bindings)
            trace = model.run(mode, derive_seed(roll_base, r))
            icu = trace.outputs["icu"]
            satisfied += max(icu) <= constraint.icu_capacity
            total_cases += trace.outputs["total_cases"]
        rows.append(
            PolicyScanRow(
                policy=policy,
                p_constraint=satisfied / m_rollouts,
                mean_total_cases=total_cases / m_rollouts,
                n_rollouts=m_rollouts,
            )
        )

    rows.sort(key=_row_sort_key)
    return PolicyScanResult(rows=tuple(rows))


def _weighted_index(rng: np.random.Generator, weights: np.ndarray) -> int:
    u = rng.random()
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1
