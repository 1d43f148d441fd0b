from __future__ import annotations

import json
import re

import numpy as np
import pytest

from kgflow.controller import Horizons, run_query
from kgflow.export import GREY, ExportNode, SubgraphExport, build_export, relation_label
from kgflow.graph import GraphView, build_graph
from kgflow.model import init_params
from kgflow.uflow import run_uflow

_TOKEN = re.compile(r'\s*(?:("(?:[^"\\]|\\.)*")|([A-Za-z_][A-Za-z0-9_]*|-?\d+(?:\.\d+)?)|(->|--|[{}\[\];=,]))')


def _tokens(text: str) -> list[str]:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise SyntaxError(f"bad character at {pos}: {text[pos:pos + 10]!r}")
        out.append(m.group(m.lastindex))
        pos = m.end()
    return out


def check_dot(text: str) -> int:
    """Minimal recursive-descent check of the DOT subset: a digraph of node, edge and attribute statements.

    Returns the number of statements.
    """
    toks = _tokens(text)
    i = 0

    def peek():
        return toks[i] if i < len(toks) else None

    def take(expected=None):
        nonlocal i
        tok = peek()
        if tok is None or (expected is not None and tok != expected):
            raise SyntaxError(f"expected {expected!r}, got {tok!r}")
        i += 1
        return tok

    def ident():
        tok = take()
        if tok in ("{", "}", "[", "]", ";", "=", ",", "->", "--"):
            raise SyntaxError(f"expected an identifier, got {tok!r}")
        return tok

    def attr_list():
        take("[")
        while peek() != "]":
            ident()
            take("=")
            ident()
            if peek() == ",":
                take(",")
        take("]")

    if peek() == "strict":
        take()
    take("digraph")
    if peek() != "{":
        ident()
    take("{")
    count = 0
    while peek() != "}":
        if peek() in ("node", "edge", "graph"):
            take()
            attr_list()
        else:
            ident()
            while peek() == "->":
                take("->")
                ident()
            if peek() == "[":
                attr_list()
        take(";")
        count += 1
    take("}")
    if i != len(toks):
        raise SyntaxError("trailing tokens after the graph")
    return count


def test_dot_checker_rejects_garbage():
    assert check_dot('digraph g { "a" -> "b" [label="x"]; }') == 1
    for bad in ('digraph { a -> ; }', 'graph { a; }', 'digraph { a [label=] ; }', 'digraph { a; } }'):
        with pytest.raises(SyntaxError):
            check_dot(bad)


def _run(graph, head, horizons, seed=0):
    p = init_params(graph.num_entities, graph.num_relations, 8, 4, seed=seed)
    view = GraphView.full(graph)
    u = run_uflow(view, p, 1, 100, np.random.default_rng(seed))
    return run_query(view, head, 0, p, horizons, u, np.random.default_rng(seed + 1))


def test_full_export_is_faithful(small_graph):
    g, _ = small_graph
    h = Horizons(4, 6, 3, 4, 1, 8, 4)
    r = _run(g, 0, h)
    ex = build_export(r.trace, g)
    assert ex.node_ids == set(r.trace.visited.tolist())
    for e in ex.edges:
        assert e.src in ex.node_ids and e.dst in ex.node_ids and 1 <= e.step <= h.T_c
    assert len(ex.edges) == sum(s.messages for s in r.trace.steps)
    assert len(ex.nodes) <= 1 + h.T_c * (h.N_s + h.N_a)
    dot = ex.to_dot()
    assert check_dot(dot) == 1 + len(ex.nodes) + len(ex.edges)
    rec = json.loads(ex.to_json())
    assert set(rec) == {"nodes", "edges", "head", "tail"}
    assert all(len(n["mass_per_step"]) == h.T_c + 1 for n in rec["nodes"])


def test_self_loop_only_head_exports_single_node():
    g = build_graph(np.array([[1, 0, 2]]), 3, 1)
    r = _run(g, 0, Horizons(5, 5, 5, 3, 1, 8, 4))
    ex = build_export(r.trace, g, ["a", "b", "c"], ["r"])
    assert [n.label for n in ex.nodes] == ["a"]
    assert {e.rel for e in ex.edges} == {"self_loop"}
    assert check_dot(ex.to_dot()) == 1 + 1 + len(ex.edges)


def test_pruned_chain_export_is_the_path():
    g = build_graph(np.array([[0, 0, 1], [1, 0, 2], [3, 0, 4]]), 5, 1, add_inverse=False, add_self_loops=False)
    r = _run(g, 0, Horizons(5, 5, 5, 2, 1, 8, 4))
    pruned = build_export(r.trace, g, prune_threshold=0.01)
    assert pruned.node_ids == {0, 1, 2}
    assert [(e.src, e.dst, e.step) for e in pruned.edges] == [(0, 1, 1), (1, 2, 2)]


def test_color_scale():
    ex = SubgraphExport([], [], 0, None, num_steps=4)
    assert ex.color(ExportNode(0, "h", [1.0, 0, 0, 0, 0])) == "#ffff00"  # attended at step 0 only
    assert ex.color(ExportNode(1, "t", [0, 0, 0, 0, 1.0])) == "#ff0000"
    assert ex.color(ExportNode(2, "m", [0, 0, 1.0, 0, 0])) == "#ff8000"
    assert ex.color(ExportNode(3, "x", [0, 1e-4, 0, 0, 0])) == GREY


def test_relation_labels():
    g = build_graph(np.array([[0, 0, 1], [0, 1, 1]]), 2, 2)
    assert relation_label(g, 1, ["p", "q"]) == "q"
    assert relation_label(g, 3, ["p", "q"]) == "q_inv"
    assert relation_label(g, 4) == "self_loop"
    assert relation_label(g, 2) == "r0_inv"


def test_labels_are_quoted():
    ex = SubgraphExport([ExportNode(0, 'say "hi"\\', [1.0])], [], 0, None, 0)
    assert check_dot(ex.to_dot('odd "name"')) == 2
