"""Command-line front end.

    epi-infer simulate|infer|scan|graph --config <path> [--out <dir>] [--omit-uniform]

Exit codes: 0 success, 1 runtime/inference failure, 2 configuration error.
All outputs are written atomically (temp file + rename) into the output
directory (--out, else io.out_dir, else the current directory). For the
graph subcommand, --config names a trace JSONL file.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .bridge import BridgedModel, ProtocolError, listen_and_accept
from .config import JobConfig, load_job_config
from .graph import build_trace_graph, graph_to_dot
from .inference import (
    DegeneratePosteriorError,
    InitializationError,
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
from .models import ConfigurationError
from .serialize import (
    atomic_write_text,
    read_traces,
    write_posterior_csv,
    write_scan_csv,
    write_traces,
)
from .trace import ExecutionContext, Record, derive_seed

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_RUNTIME_ERRORS = (
    DegeneratePosteriorError,
    ToleranceTooTightError,
    InitializationError,
    ProtocolError,
)


def _out_dir(job: JobConfig, out_flag) -> Path:
    directory = Path(out_flag or job.out_dir or ".")
    directory.mkdir(parents=True, exist_ok=True)
    return directory


class _BridgeSession:
    """Accept the external simulator once and share the controller across runs."""

    def __init__(self, settings):
        print(f"bridge: waiting for a client on {settings.host}:{settings.port}", flush=True)
        self.controller, self.listener = listen_and_accept(
            settings.host, settings.port, timeout=settings.timeout
        )
        self.controller.timeout = settings.timeout
        self.controller.max_frame = settings.max_frame
        self.controller.sock.settimeout(settings.timeout)
        print("bridge: client connected", flush=True)

    def close(self):
        self.controller.close()
        try:
            self.listener.close()
        except OSError:
            pass


def _build_model(job: JobConfig, with_data: bool = True, policy=None, session=None):
    if job.model is not None:
        return job.model.build_model(with_data=with_data, policy=policy)
    config = dict(job.bridge.config)
    if not with_data:
        config.pop("data", None)
    if policy is not None:
        config["policy"] = {
            "start_day": policy.start_day,
            "contact_reduction": policy.contact_reduction,
            "vaccination_coverage": policy.vaccination_coverage,
        }
    return BridgedModel(session.controller, config)


def cmd_simulate(config_path, out_flag=None) -> int:
    job = load_job_config(config_path)
    out = _out_dir(job, out_flag)
    traces = []
    path_rows = ["run,day,S,I,R,new_infections,icu"]

    if job.model is not None and job.model.kind == "normal":
        model = job.model.build_model()
        for run_index in range(job.n_runs):
            traces.append(model.run(Record(), derive_seed(job.seed, run_index)))
    elif job.model is not None:
        for run_index in range(job.n_runs):
            ctx = ExecutionContext(Record(), derive_seed(job.seed, run_index))
            path = _execute_native(job.model, ctx)
            traces.append(ctx.finish())
            for day in range(len(path.s)):
                path_rows.append(
                    f"{run_index},{day},{path.s[day]},{path.i[day]},{path.r[day]},"
                    f"{path.new_infections[day]},{path.icu[day]}"
                )
        atomic_write_text(out / "paths.csv", "\n".join(path_rows) + "\n")
    else:
        session = _BridgeSession(job.bridge)
        try:
            model = _build_model(job, session=session)
            for run_index in range(job.n_runs):
                traces.append(model.run(Record(), derive_seed(job.seed, run_index)))
        finally:
            session.close()

    write_traces(out / "traces.jsonl", traces)
    print(f"simulate: wrote {len(traces)} trace(s) to {out / 'traces.jsonl'}")
    return EXIT_OK


def _execute_native(spec, ctx):
    from .models import simulate_ibm, simulate_sir

    if spec.kind == "sir":
        return simulate_sir(ctx, spec.sir, spec.priors, spec.policy, spec.data, spec.rho)
    return simulate_ibm(ctx, spec.ibm, spec.priors, spec.policy, spec.data, spec.rho)


def _run_engine(job: JobConfig, session=None):
    settings = job.inference
    if settings is None:
        raise ConfigurationError("inference section is required for 'infer'")
    engine = settings.engine

    if engine == "is":
        model = _build_model(job, with_data=True, session=session)
        return run_is(model, settings.n_particles, job.seed)
    if engine == "lmh":
        model = _build_model(job, with_data=True, session=session)
        return run_lmh(model, settings.n_steps, settings.burn_in, job.seed)
    if engine == "abc":
        data = _job_data(job)
        if data is None:
            raise ConfigurationError("abc requires a data section")
        model = _build_model(job, with_data=False, session=session)
        return run_abc(
            model, data, settings.n_particles, settings.tolerance, job.seed,
            proposal_budget=settings.proposal_budget,
        )
    if engine == "event":
        constraint = _job_constraint(job)
        model = _build_model(job, with_data=False, session=session)
        return run_conditioned_event(model, constraint, settings.n_particles, job.seed)
    raise ConfigurationError(f"unknown engine {engine!r}")


def _job_data(job: JobConfig):
    return _job_spec(job).data


def _job_spec(job: JobConfig):
    if job.model is not None:
        return job.model
    from .config import model_spec_from_json

    return model_spec_from_json(job.bridge.config)


def _job_constraint(job: JobConfig):
    return _job_spec(job).constraint()


def cmd_infer(config_path, out_flag=None) -> int:
    job = load_job_config(config_path)
    if job.inference is None:
        raise ConfigurationError("inference section is required for 'infer'")
    if job.inference.engine in ("is", "lmh", "abc") and not _job_spec(job).has_observations():
        raise ConfigurationError("infer requires data (or an icu capacity with engine 'event')")
    out = _out_dir(job, out_flag)

    session = _BridgeSession(job.bridge) if job.bridge is not None else None
    started = time.perf_counter()
    try:
        posterior = _run_engine(job, session=session)
    finally:
        if session is not None:
            session.close()
    runtime = time.perf_counter() - started

    write_posterior_csv(out / "posterior.csv", posterior)

    latents = {}
    first = posterior.particles[0]
    for label, value in first.latents.items():
        if isinstance(value, tuple):
            continue
        latents[label] = {
            "mean": posterior_mean(posterior, label),
            "q05": posterior_quantile(posterior, label, 0.05),
            "q50": posterior_quantile(posterior, label, 0.50),
            "q95": posterior_quantile(posterior, label, 0.95),
        }
    summary = {
        "engine": posterior.engine,
        "n": len(posterior.particles),
        "ess": ess(posterior),
        "latents": latents,
        "runtime_seconds": runtime,
        "seed": job.seed,
    }
    if posterior.n_proposals is not None:
        summary["n_proposals"] = posterior.n_proposals
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    means = ", ".join(f"{k}={v['mean']:.4g}" for k, v in latents.items())
    print(f"infer[{posterior.engine}]: n={summary['n']} ess={summary['ess']:.1f} {means}")
    return EXIT_OK


def cmd_scan(config_path, out_flag=None) -> int:
    job = load_job_config(config_path)
    if job.scan is None:
        raise ConfigurationError("scan section is required for 'scan'")
    out = _out_dir(job, out_flag)
    constraint = _job_constraint(job)

    latent_source = None
    latent_labels = ("beta", "gamma")
    if job.model is not None:
        latent_labels = job.model.latent_labels()

    session = _BridgeSession(job.bridge) if job.bridge is not None else None
    try:
        if job.scan.latent_source == "posterior":
            latent_source = _run_engine(job, session=session)

        def model_factory(policy):
            return _build_model(job, with_data=False, policy=policy, session=session)

        result = scan_policies(
            model_factory,
            job.scan.policies,
            job.scan.m_rollouts,
            constraint,
            derive_seed(job.seed, 1_000_003),
            latent_source=latent_source,
            latent_labels=latent_labels,
        )
    finally:
        if session is not None:
            session.close()

    write_scan_csv(out / "scan.csv", result)
    best = result.rows[0]
    print(
        f"scan: {len(result.rows)} policies x {job.scan.m_rollouts} rollouts; best "
        f"(start_day={best.policy.start_day}, c={best.policy.contact_reduction:g}, "
        f"v={best.policy.vaccination_coverage:g}) p_constraint={best.p_constraint:.3f}"
    )
    return EXIT_OK


def cmd_graph(trace_path, out_flag=None, omit_uniform=False) -> int:
    traces = read_traces(trace_path)
    if not traces:
        raise ConfigurationError(f"no traces found in {trace_path}")
    graph = build_trace_graph(traces, omit_uniform=omit_uniform)
    dot = graph_to_dot(graph)
    out = Path(out_flag or ".")
    out.mkdir(parents=True, exist_ok=True)
    target = out / "trace_graph.dot"
    atomic_write_text(target, dot)
    print(f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges -> {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epi-infer",
        description="Run epidemic simulations, Bayesian calibration, policy scans, "
        "and trace-structure exports from a declarative JSON config.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "run Record-mode simulations; write trace JSONL and path CSV"),
        ("infer", "run the configured inference engine; write posterior CSV and summary JSON"),
        ("scan", "evaluate an intervention-policy grid; write ranked scan CSV"),
        ("graph", "export the trace-structure graph of a trace JSONL file as DOT"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="job config JSON (trace JSONL for 'graph')")
        cmd.add_argument("--out", default=None, help="output directory")
        if name == "graph":
            cmd.add_argument(
                "--omit-uniform",
                action="store_true",
                help="drop uniform-family nodes and splice their transitions",
            )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out)
        if args.command == "infer":
            return cmd_infer(args.config, args.out)
        if args.command == "scan":
            return cmd_scan(args.config, args.out)
        if args.command == "graph":
            return cmd_graph(args.config, args.out, omit_uniform=args.omit_uniform)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
