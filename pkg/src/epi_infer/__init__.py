"""epi-infer: run stochastic epidemic simulators as probabilistic programs.

The toolkit records and redirects the random draws of a simulator (built-in
chain-binomial SIR and individual-based models, or an external simulator
attached over a framed wire protocol), and performs Bayesian calibration
(importance sampling, single-site trace MCMC, rejection ABC), outcome-event
conditioning, and intervention-policy scanning over the resulting traces.
"""

from .distributions import (
    Bernoulli,
    Beta,
    Binomial,
    Categorical,
    Distribution,
    Gamma,
    LogNormal,
    Normal,
    Poisson,
    Uniform,
    Value,
    ValueTypeError,
    log_prob,
    sample_value,
)
from .trace import (
    Address,
    ExecutionContext,
    FunctionModel,
    IncompatibleBindingError,
    ModelExecutionError,
    ObserveEntry,
    Record,
    Redirect,
    SampleEntry,
    Trace,
    derive_seed,
    run_model,
)
from .models import (
    ConfigurationError,
    DEFAULT_PRIORS,
    EpiPriors,
    EpidemicPath,
    IbmConfig,
    InterventionPolicy,
    ObservationSeries,
    OutcomeConstraint,
    SirConfig,
    constraint_satisfied,
    final_size_oracle,
    ibm_model,
    icu_series,
    reed_frost_step,
    simulate_ibm,
    simulate_sir,
    sir_model,
)
from .inference import (
    DegeneratePosteriorError,
    InitializationError,
    Particle,
    PolicyScanResult,
    PolicyScanRow,
    Posterior,
    ToleranceTooTightError,
    ess,
    posterior_mean,
    posterior_quantile,
    run_abc,
    run_conditioned_event,
    run_is,
    run_lmh,
    scan_policies,
)

__version__ = "0.1.0"
