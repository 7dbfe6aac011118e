"""File formats: trace JSONL, posterior CSV, scan CSV.

Traces are written one JSON object per line. All stored values are finite;
the only extended real that can occur is a -inf observe log-prob (and hence
log_likelihood), encoded as the string "-inf".
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from typing import Iterable

from .distributions import dist_from_json, dist_to_json, value_from_json, value_to_json
from .trace import Address, ObserveEntry, SampleEntry, Trace

__all__ = [
    "format_real",
    "write_traces",
    "read_traces",
    "trace_to_json",
    "trace_from_json",
    "write_posterior_csv",
    "read_posterior_csv",
    "write_scan_csv",
    "atomic_write_text",
]


def format_real(x: float) -> str:
    """Render a float with 17 significant digits (exact double round-trip)."""
    if x == -math.inf:
        return "-inf"
    return format(x, ".17g")


def _enc_extended(x: float):
    return "-inf" if x == -math.inf else x


def _dec_extended(x) -> float:
    if x == "-inf":
        return -math.inf
    return float(x)


def trace_to_json(trace: Trace) -> dict:
    entries = []
    for e in trace.entries:
        entries.append(
            {
                "kind": "sample" if isinstance(e, SampleEntry) else "observe",
                "label": e.address.label,
                "instance": e.address.instance,
                "dist": dist_to_json(e.dist),
                "value": value_to_json(e.value),
                "log_prob": _enc_extended(e.log_prob),
            }
        )
    return {
        "seed": trace.seed,
        "entries": entries,
        "outputs": {k: value_to_json(v) for k, v in trace.outputs.items()},
        "log_prior": trace.log_prior,
        "log_likelihood": _enc_extended(trace.log_likelihood),
    }


def trace_from_json(obj: dict) -> Trace:
    entries = []
    for raw in obj["entries"]:
        address = Address(raw["label"], raw["instance"])
        dist = dist_from_json(raw["dist"])
        value = value_from_json(raw["value"])
        log_p = _dec_extended(raw["log_prob"])
        cls = SampleEntry if raw["kind"] == "sample" else ObserveEntry
        entries.append(cls(address, dist, value, log_p))
    return Trace(
        entries=tuple(entries),
        outputs={k: value_from_json(v) for k, v in obj["outputs"].items()},
        log_prior=float(obj["log_prior"]),
        log_likelihood=_dec_extended(obj["log_likelihood"]),
        seed=int(obj["seed"]),
    )


def write_traces(path, traces: Iterable[Trace]) -> None:
    """Write traces as JSONL (atomically: write to a temp file, then rename)."""
    lines = [json.dumps(trace_to_json(t), separators=(",", ":"), allow_nan=False) for t in traces]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_traces(path) -> list[Trace]:
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                traces.append(trace_from_json(json.loads(line)))
    return traces


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_real(value)
    raise ValueError(f"cannot render {value!r} in a CSV cell")


def _parse_cell(text: str):
    if text == "true":
        return True
    if text == "false":
        return False
    if text == "-inf":
        return -math.inf
    try:
        return int(text)
    except ValueError:
        return float(text)


def posterior_columns(posterior) -> tuple[list[str], list[str]]:
    """Column layout: latent labels, then scalar output names (first particle's order).

    Vector-valued outputs (e.g. a per-day ICU series) are not representable as
    CSV cells and are skipped; they remain available on the particles and in
    trace JSONL exports.
    """
    first = posterior.particles[0]
    latent_cols = list(first.latents)
    output_cols = [k for k, v in first.outputs.items() if not isinstance(v, tuple)]
    return latent_cols, output_cols


def write_posterior_csv(path, posterior) -> None:
    latent_cols, output_cols = posterior_columns(posterior)
    rows = [["particle", "log_weight", *latent_cols, *output_cols]]
    for i, particle in enumerate(posterior.particles):
        row = [str(i), _cell(particle.log_weight)]
        row += [_cell(particle.latents[k]) for k in latent_cols]
        row += [_cell(particle.outputs[k]) for k in output_cols]
        rows.append(row)
    atomic_write_text(path, "\n".join(",".join(r) for r in rows) + "\n")


def read_posterior_csv(path) -> list[dict]:
    """Reload a posterior CSV as a list of per-particle dicts (exact values)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out = []
        for row in reader:
            out.append({k: _parse_cell(v) for k, v in zip(header, row)})
    return out


SCAN_HEADER = (
    "policy_start_day",
    "contact_reduction",
    "vaccination_coverage",
    "p_constraint",
    "mean_total_cases",
    "n_rollouts",
)


def write_scan_csv(path, result) -> None:
    rows = [",".join(SCAN_HEADER)]
    for r in result.rows:
        rows.append(
            ",".join(
                [
                    str(r.policy.start_day),
                    format_real(r.policy.contact_reduction),
                    format_real(r.policy.vaccination_coverage),
                    format_real(r.p_constraint),
                    format_real(r.mean_total_cases),
                    str(r.n_rollouts),
                ]
            )
        )
    atomic_write_text(path, "\n".join(rows) + "\n")
