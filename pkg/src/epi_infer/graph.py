"""Latent-structure graph over traces, exported as Graphviz DOT.

Nodes aggregate entries per label (one node per random-choice site across
all instances and traces); edges count transitions between successive
entries within each trace. With ``omit_uniform`` set, uniform-family
entries are dropped from each trace's entry sequence before counting, which
splices their incident transitions (a -> u -> b becomes a -> b).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .trace import Trace

__all__ = ["TraceGraph", "build_trace_graph", "graph_to_dot"]


@dataclass
class TraceGraph:
    nodes: dict = field(default_factory=dict)  # label -> {"families": set, "hits": int}
    edges: dict = field(default_factory=dict)  # (label_from, label_to) -> count

    def node_family(self, label: str) -> str:
        return ",".join(sorted(self.nodes[label]["families"]))


def build_trace_graph(traces: Iterable[Trace], omit_uniform: bool = False) -> TraceGraph:
    graph = TraceGraph()
    for trace in traces:
        entries = trace.entries
        if omit_uniform:
            entries = tuple(e for e in entries if e.dist.family != "uniform")
        for e in entries:
            node = graph.nodes.setdefault(e.address.label, {"families": set(), "hits": 0})
            node["families"].add(e.dist.family)
            node["hits"] += 1
        for prev, nxt in zip(entries, entries[1:]):
            key = (prev.address.label, nxt.address.label)
            graph.edges[key] = graph.edges.get(key, 0) + 1
    return graph


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def graph_to_dot(graph: TraceGraph) -> str:
    """Render deterministically: nodes by label, edges by (from, to)."""
    lines = ["digraph trace {"]
    for label in sorted(graph.nodes):
        hits = graph.nodes[label]["hits"]
        body = f"{_escape(label)}\\n{_escape(graph.node_family(label))} ({hits})"
        lines.append(f'  "{_escape(label)}" [label="{body}"];')
    for (src, dst) in sorted(graph.edges):
        count = graph.edges[(src, dst)]
        lines.append(f'  "{_escape(src)}" -> "{_escape(dst)}" [label="{count}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
