"""Execution contexts, traces, record/redirect semantics, serialization."""

import math
import threading

import pytest

from epi_infer.distributions import Bernoulli, Beta, Binomial, Normal, Poisson, Uniform
from epi_infer.models import DEFAULT_PRIORS, SirConfig, sir_model
from epi_infer.serialize import read_traces, trace_from_json, trace_to_json, write_traces
from epi_infer.trace import (
    Address,
    ExecutionContext,
    FunctionModel,
    IncompatibleBindingError,
    ModelExecutionError,
    Record,
    Redirect,
    derive_seed,
    run_model,
)


def test_instance_counting_per_label():
    ctx = ExecutionContext(Record(), 1)
    ctx.sample("step", Bernoulli(0.5))
    ctx.sample("step", Bernoulli(0.5))
    ctx.sample("other", Bernoulli(0.5))
    trace = ctx.finish()
    addresses = [e.address for e in trace.entries]
    assert addresses == [Address("step", 0), Address("step", 1), Address("other", 0)]


def test_record_degenerate_sample_has_zero_log_prob():
    ctx = ExecutionContext(Record(), 3)
    value = ctx.sample("beta", Bernoulli(1.0))
    trace = ctx.finish()
    assert value is True
    assert trace.entries[0].log_prob == 0.0
    assert trace.log_prior == 0.0


def test_redirect_binding_honored():
    ctx = ExecutionContext(Redirect({Address("beta", 0): False}), 3)
    value = ctx.sample("beta", Bernoulli(0.5))
    trace = ctx.finish()
    assert value is False
    assert trace.entries[0].log_prob == pytest.approx(math.log(0.5))


def test_redirect_unbound_falls_back_to_fresh_sampling():
    ctx = ExecutionContext(Redirect({}), 5)
    value = ctx.sample("x", Bernoulli(1.0))
    assert value is True  # fresh draw, not a failure


def test_redirect_incompatible_binding_raises_by_default():
    ctx = ExecutionContext(Redirect({Address("n", 0): 7}), 5)
    with pytest.raises(IncompatibleBindingError):
        ctx.sample("n", Binomial(3, 0.5))


def test_redirect_incompatible_binding_resampled_when_lenient():
    mode = Redirect({Address("n", 0): 7}, resample_incompatible=True)
    ctx = ExecutionContext(mode, 5)
    value = ctx.sample("n", Binomial(3, 0.5))
    assert 0 <= value <= 3


def test_observe_accumulates_log_likelihood():
    ctx = ExecutionContext(Record(), 1)
    ctx.observe("obs", Poisson(2.0), 2)
    trace = ctx.finish()
    assert trace.log_likelihood == pytest.approx(math.log(2.0) - 2.0, rel=1e-12)

    ctx = ExecutionContext(Record(), 1)
    ctx.observe("obs", Bernoulli(0.5), True)
    assert ctx.finish().log_likelihood == pytest.approx(-0.6931472, abs=1e-7)


def test_observe_outside_support_zeroes_the_trace_weight():
    ctx = ExecutionContext(Record(), 1)
    ctx.observe("obs", Uniform(0.0, 1.0), 2.0)
    trace = ctx.finish()
    assert trace.log_likelihood == -math.inf
    assert trace.log_joint == -math.inf


def test_empty_model_yields_empty_trace():
    trace = run_model(lambda ctx: None, Record(), 9)
    assert trace.entries == ()
    assert trace.log_joint == 0.0


def _sir():
    return sir_model(SirConfig(400, 5, 30), DEFAULT_PRIORS)


def test_same_seed_same_mode_bit_identical_traces():
    model = _sir()
    assert model.run(Record(), 1234) == model.run(Record(), 1234)


def test_full_redirect_replay_reproduces_trace_exactly():
    model = _sir()
    recorded = model.run(Record(), 77)
    replayed = model.run(Redirect(recorded.bindings()), 78)  # different seed on purpose
    assert [e.value for e in replayed.entries] == [e.value for e in recorded.entries]
    assert [e.address for e in replayed.entries] == [e.address for e in recorded.entries]
    assert replayed.log_joint == recorded.log_joint
    assert replayed.log_prior == recorded.log_prior


def test_log_accumulators_match_entry_sums():
    trace = _sir().run(Record(), 4242)
    prior = math.fsum(e.log_prob for e in trace.entries if type(e).__name__ == "SampleEntry")
    assert trace.log_prior == pytest.approx(prior, rel=1e-12)


def test_address_uniqueness():
    trace = _sir().run(Record(), 31)
    addresses = [e.address for e in trace.entries]
    assert len(addresses) == len(set(addresses))


def test_latents_are_instance_zero_of_each_label():
    trace = _sir().run(Record(), 8)
    latents = trace.latents()
    assert set(latents) == {"beta", "gamma", "step_inf", "step_rec"}
    assert latents["beta"] == trace.entries[0].value


def test_model_error_carries_partial_addresses():
    def broken(ctx):
        ctx.sample("a", Bernoulli(0.5))
        ctx.sample("b", Normal(0, 1))
        raise ZeroDivisionError("boom")

    with pytest.raises(ModelExecutionError) as err:
        run_model(broken, Record(), 2)
    assert err.value.addresses == [Address("a", 0), Address("b", 0)]


def test_derive_seed_is_deterministic_and_spread():
    seeds = [derive_seed(123, i) for i in range(1000)]
    assert seeds == [derive_seed(123, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert all(0 <= s < 2**64 for s in seeds)
    assert derive_seed(123, 0) != derive_seed(124, 0)


def test_seed_validation():
    with pytest.raises(ValueError):
        ExecutionContext(Record(), -1)
    with pytest.raises(ValueError):
        ExecutionContext(Record(), 2**64)
    with pytest.raises(ValueError):
        ExecutionContext(Record(), 1.5)


def test_outputs_reject_non_finite_values():
    ctx = ExecutionContext(Record(), 1)
    with pytest.raises(ValueError):
        ctx.set_output("bad", float("nan"))
    with pytest.raises(ValueError):
        ctx.set_output("bad", (1.0, float("inf")))


def test_trace_jsonl_round_trip(tmp_path):
    model = _sir()
    traces = [model.run(Record(), derive_seed(10, i)) for i in range(5)]

    def with_observe(ctx):
        ctx.sample("theta", Normal(0, 1))
        ctx.observe("y", Uniform(0.0, 1.0), 2.0)  # -inf log-lik exercises "-inf" encoding

    traces.append(run_model(with_observe, Record(), 3))

    target = tmp_path / "traces.jsonl"
    write_traces(target, traces)
    assert read_traces(target) == traces


def test_trace_json_object_round_trip():
    trace = _sir().run(Record(), 55)
    assert trace_from_json(trace_to_json(trace)) == trace


def test_concurrent_contexts_are_independent():
    model = _sir()
    expected = [model.run(Record(), derive_seed(5, i)) for i in range(8)]
    results = [None] * 8

    def worker(i):
        results[i] = model.run(Record(), derive_seed(5, i))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == expected


def test_finished_context_rejects_further_statements():
    ctx = ExecutionContext(Record(), 1)
    ctx.finish()
    with pytest.raises(RuntimeError):
        ctx.sample("x", Bernoulli(0.5))
