"""Subgraph export of a single query's flow for visualization."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .controller import FlowTrace
from .graph import Graph

GREY = "#c0c0c0"
FAINT_MASS = 1e-3


@dataclass
class ExportNode:
    id: int
    label: str
    mass_per_step: list[float]

    @property
    def total_mass(self) -> float:
        return float(sum(self.mass_per_step))

    def importance(self) -> float | None:
        """Step-weighted mean ``sum_t t*a_t / sum_t a_t``; ``None`` when nearly unattended."""
        m = np.asarray(self.mass_per_step)
        total = m.sum()
        if total < FAINT_MASS:
            return None
        return float(np.dot(np.arange(m.size), m) / total)


@dataclass
class ExportEdge:
    src: int
    rel: str
    dst: int
    step: int


@dataclass
class SubgraphExport:
    nodes: list[ExportNode]
    edges: list[ExportEdge]
    head: int
    tail: int | None
    num_steps: int = 0

    @property
    def node_ids(self) -> set[int]:
        return {n.id for n in self.nodes}

    def color(self, node: ExportNode) -> str:
        """Yellow for nodes attended early, red for late ones, grey when barely attended."""
        imp = node.importance()
        if imp is None:
            return GREY
        frac = imp / self.num_steps if self.num_steps else 1.0
        green = int(round(255 * (1.0 - min(max(frac, 0.0), 1.0))))
        return f"#ff{green:02x}00"

    def to_record(self) -> dict:
        return {
            "nodes": [{"id": n.id, "label": n.label, "mass_per_step": n.mass_per_step} for n in self.nodes],
            "edges": [{"src": e.src, "rel": e.rel, "dst": e.dst, "step": e.step} for e in self.edges],
            "head": self.head,
            "tail": self.tail,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1) + "\n"

    def to_dot(self, name: str = "flow") -> str:
        lines = [f"digraph {_quote(name)} {{", "  node [style=filled];"]
        for n in self.nodes:
            attrs = [f"label={_quote(n.label)}", f"fillcolor={_quote(self.color(n))}"]
            if n.id == self.head:
                attrs.append("shape=box")
            elif n.id == self.tail:
                attrs.append("shape=doublecircle")
            lines.append(f"  {_quote(str(n.id))} [{', '.join(attrs)}];")
        for e in self.edges:
            lines.append(f"  {_quote(str(e.src))} -> {_quote(str(e.dst))} "
                         f"[label={_quote(f'{e.rel} @{e.step}')}];")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def relation_label(graph: Graph, rel: int, names: list[str] | None = None) -> str:
    R = graph.num_raw_relations
    if graph.has_self_loops and rel == graph.self_loop_relation:
        return "self_loop"
    base = rel - R if graph.has_inverse and rel >= R else rel
    label = names[base] if names is not None else f"r{base}"
    return f"{label}_inv" if base != rel else label


def build_export(trace: FlowTrace, graph: Graph, entity_names: list[str] | None = None,
                 relation_names: list[str] | None = None, prune_threshold: float | None = None) -> SubgraphExport:
    """Nodes are the trace's visited set and edges the C-Flow edges between them.

    With ``prune_threshold`` only nodes whose attention summed over steps
    reaches the threshold are kept, with the edges among them.
    """
    steps = trace.attention_per_step
    nodes = []
    for v in sorted(int(x) for x in trace.visited):
        label = entity_names[v] if entity_names is not None else str(v)
        nodes.append(ExportNode(v, label, [float(a.get(v, 0.0)) for a in steps]))
    if prune_threshold is not None:
        nodes = [n for n in nodes if n.total_mass >= prune_threshold]
    keep = {n.id for n in nodes}
    edges = []
    for t, step in enumerate(trace.steps, start=1):
        for e in step.cflow_edges.tolist():
            s, d = int(graph.src[e]), int(graph.dst[e])
            if s in keep and d in keep:
                edges.append(ExportEdge(s, relation_label(graph, int(graph.rel[e]), relation_names), d, t))
    return SubgraphExport(nodes, edges, trace.head, trace.tail, len(trace.steps))
