"""The per-query sampling/attending loop and its bookkeeping.

Each step:

1. attended = top-N_a nodes of the current attention
2. sample at most N_e out-edges per attended node
3. score the sampled edges and build the transition
4. propagate and renormalize attention
5. seen = top-N_s nodes of the new attention
6. keep the sampled edges running from attended into seen nodes
7. C-Flow update over those edges
8. visited grows by the seen nodes

Queries in a batch share the graph view, unconscious states and parameters
but each draws from its own random stream, so a query's trace does not
depend on which other queries are batched with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aflow import (AttentionVector, ContractError, SparseTransition, build_transition, edge_logits,
                    propagate_attention, score_edges, select_topk)
from .cflow import QueryBatch, SparseNodeStates, cflow_step, edge_context, init_cflow
from .graph import GraphView, sample_neighbors
from .model import ModelParams
from .tensor import Tensor
from .uflow import UnconsciousStates


@dataclass(frozen=True)
class Horizons:
    max_sampled_edges_per_node: int = 200
    max_seen_nodes_per_step: int = 200
    max_attended_nodes_per_step: int = 20
    n_steps_of_c_flow: int = 8
    n_steps_of_u_flow: int = 2
    n_dims: int = 100
    n_dims_att: int = 50
    max_sampled_edges_per_step: int = 10000

    def __post_init__(self):
        for name in ("max_sampled_edges_per_node", "max_seen_nodes_per_step", "max_attended_nodes_per_step",
                     "n_dims", "n_dims_att", "max_sampled_edges_per_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_steps_of_u_flow < 0:
            raise ValueError("n_steps_of_u_flow must be non-negative")
        if self.n_steps_of_c_flow < 2:
            raise ValueError("n_steps_of_c_flow must be at least 2")
        if self.max_attended_nodes_per_step > self.max_seen_nodes_per_step:
            raise ValueError("max_attended_nodes_per_step must not exceed max_seen_nodes_per_step")

    # short names used in the complexity bounds
    @property
    def N_e(self) -> int:
        return self.max_sampled_edges_per_node

    @property
    def N_s(self) -> int:
        return self.max_seen_nodes_per_step

    @property
    def N_a(self) -> int:
        return self.max_attended_nodes_per_step

    @property
    def T_c(self) -> int:
        return self.n_steps_of_c_flow


@dataclass
class StepTrace:
    attended: np.ndarray  # nodes, descending attention
    sampled_edges: np.ndarray  # edge ids
    seen: np.ndarray  # nodes, descending attention
    attention: dict[int, float]  # attention after this step
    cflow_edges: np.ndarray  # edge ids that carried C-Flow messages
    visited_size: int
    visited_growth: int

    @property
    def edges_scored(self) -> int:
        return int(self.sampled_edges.shape[0])

    @property
    def messages(self) -> int:
        return int(self.cflow_edges.shape[0])


@dataclass
class FlowTrace:
    head: int
    rel: int
    tail: int | None
    steps: list[StepTrace] = field(default_factory=list)
    visited: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def attention_per_step(self) -> list[dict[int, float]]:
        """``[a^0, a^1, ..., a^T]``."""
        return [{self.head: 1.0}] + [s.attention for s in self.steps]

    @property
    def final_attention(self) -> dict[int, float]:
        return self.steps[-1].attention if self.steps else {self.head: 1.0}


@dataclass
class QueryResult:
    attention: dict[int, float]
    trace: FlowTrace

    def scores(self, num_entities: int) -> np.ndarray:
        out = np.zeros(num_entities)
        for node, mass in self.attention.items():
            out[node] = mass
        return out


@dataclass
class BatchResult:
    attention: AttentionVector  # final, differentiable
    states: SparseNodeStates
    traces: list[FlowTrace]
    transitions: list[SparseTransition] = field(default_factory=list)

    def results(self) -> list[QueryResult]:
        return [QueryResult(self.attention.for_query(b), tr) for b, tr in enumerate(self.traces)]

    def tail_mass(self, tails) -> Tensor:
        """Differentiable final attention on each query's tail (0 when absent)."""
        tails = np.asarray(tails, dtype=np.int64)
        a = self.attention
        keys = np.arange(tails.shape[0], dtype=np.int64) * a.num_nodes + tails
        rows = SparseNodeStates(a.keys, a.mass, a.num_nodes).rows_for(keys)
        padded = T.concat([a.mass, Tensor(np.zeros(1, dtype=a.mass.dtype))])
        return T.gather(padded, rows)


def _group_bounds(query_ids: np.ndarray, num_queries: int) -> np.ndarray:
    return np.searchsorted(query_ids, np.arange(num_queries + 1))


def run_batch(view: GraphView, heads, rels, params: ModelParams, horizons: Horizons,
              ustates: UnconsciousStates | Tensor, rngs: list[np.random.Generator], tails=None,
              update_scope: str = "visited", keep_transitions: bool = False) -> BatchResult:
    graph = view.graph
    N = graph.num_entities
    heads = np.asarray(heads, dtype=np.int64).reshape(-1)
    rels = np.asarray(rels, dtype=np.int64).reshape(-1)
    B = heads.shape[0]
    if len(rngs) != B:
        raise ValueError("one random generator per query is required")
    if heads.size and (heads.min() < 0 or heads.max() >= N):
        raise IndexError("query head outside entity range")
    U = ustates.states if isinstance(ustates, UnconsciousStates) else ustates
    tails_arr = None if tails is None else np.asarray(tails, dtype=np.int64).reshape(-1)

    query = QueryBatch(heads, rels, T.gather(params.entity_emb, heads), T.gather(params.relation_emb, rels), tails_arr)
    attention = AttentionVector.one_hot(heads, N, dtype=params.dtype)
    states = init_cflow(query, U, N)
    traces = [FlowTrace(int(h), int(r), None if tails_arr is None else int(tails_arr[b]))
              for b, (h, r) in enumerate(zip(heads, rels))]
    transitions = []

    for _ in range(horizons.n_steps_of_c_flow):
        att_pos = select_topk(attention, horizons.max_attended_nodes_per_step)
        att_keys = attention.keys[att_pos]
        att_bounds = _group_bounds(att_keys // N, B)

        edge_chunks, edge_query = [], []
        for b in range(B):
            # node-id order keeps the rng draws independent of attention values
            nodes = np.sort(att_keys[att_bounds[b]:att_bounds[b + 1]] % N)
            sample = sample_neighbors(view, nodes, horizons.max_sampled_edges_per_node, rngs[b])
            if sample.edge_ids.size == 0:
                raise ContractError(f"query {b}: attended nodes have no eligible out-edges")
            edge_chunks.append(sample.edge_ids)
            edge_query.append(np.full(sample.edge_ids.shape[0], b, dtype=np.int64))
        edge_ids = np.concatenate(edge_chunks)
        e_q = np.concatenate(edge_query)
        edge_bounds = np.concatenate([[0], np.cumsum([c.shape[0] for c in edge_chunks])])
        src_keys = e_q * N + graph.src[edge_ids]
        dst_keys = e_q * N + graph.dst[edge_ids]
        e_rel = graph.rel[edge_ids]

        padded = states.with_zero_row()
        h_src = T.gather(padded, states.rows_for(src_keys))
        h_dst = T.gather(padded, states.rows_for(dst_keys))
        u_dst = T.gather(U, graph.dst[edge_ids])
        c_r = edge_context(e_rel, e_q, params.relation_emb, query)
        logits = edge_logits(h_src, h_dst, u_dst, c_r, params.aflow)
        transition = build_transition(score_edges(src_keys, dst_keys, logits, N), N)
        if keep_transitions:
            transitions.append(transition)
        new_attention = propagate_attention(transition, attention, np.sort(att_keys), B)

        seen_pos = select_topk(new_attention, horizons.max_seen_nodes_per_step)
        seen_keys = new_attention.keys[seen_pos]
        selected = np.isin(dst_keys, seen_keys)
        prev_visited = states.keys
        states = cflow_step(states, query, new_attention, src_keys[selected], e_rel[selected], dst_keys[selected],
                            att_keys, seen_keys, U, params.relation_emb, params.cflow, update_scope)

        seen_bounds = _group_bounds(seen_keys // N, B)
        vis_bounds = _group_bounds(states.keys // N, B)
        prev_bounds = _group_bounds(prev_visited // N, B)
        for b, trace in enumerate(traces):
            ids_b = edge_ids[edge_bounds[b]:edge_bounds[b + 1]]
            sel_b = selected[edge_bounds[b]:edge_bounds[b + 1]]
            size = int(vis_bounds[b + 1] - vis_bounds[b])
            trace.steps.append(StepTrace(
                attended=att_keys[att_bounds[b]:att_bounds[b + 1]] % N,
                sampled_edges=ids_b,
                seen=seen_keys[seen_bounds[b]:seen_bounds[b + 1]] % N,
                attention=new_attention.for_query(b),
                cflow_edges=ids_b[sel_b],
                visited_size=size,
                visited_growth=size - int(prev_bounds[b + 1] - prev_bounds[b]),
            ))
        attention = new_attention

    vis_bounds = _group_bounds(states.keys // N, B)
    for b, trace in enumerate(traces):
        trace.visited = states.keys[vis_bounds[b]:vis_bounds[b + 1]] % N
    return BatchResult(attention, states, traces, transitions)


def run_query(view: GraphView, head: int, rel: int, params: ModelParams, horizons: Horizons,
              ustates: UnconsciousStates | Tensor, rng: np.random.Generator, tail: int | None = None,
              update_scope: str = "visited") -> QueryResult:
    batch = run_batch(view, [head], [rel], params, horizons, ustates, [rng],
                      None if tail is None else [tail], update_scope)
    return batch.results()[0]


@dataclass
class BoundCheck:
    name: str
    step: int
    measured: int
    bound: int

    @property
    def passed(self) -> bool:
        return self.measured <= self.bound


def complexity_report(trace: FlowTrace, horizons: Horizons, graph=None) -> list[BoundCheck]:
    """Compare per-step counters against the analytic budget.

    Message pairs (distinct attended->seen node pairs) are bounded by
    ``N_a * N_s``; raw messages can exceed that on multigraphs, so they are
    checked against the number of scored edges instead.  ``graph`` is needed
    only to count distinct pairs.
    """
    N_a, N_e, N_s = horizons.N_a, horizons.N_e, horizons.N_s
    checks = []
    for t, step in enumerate(trace.steps, start=1):
        checks.append(BoundCheck("attended", t, len(step.attended), N_a))
        checks.append(BoundCheck("seen", t, len(step.seen), N_s))
        checks.append(BoundCheck("edges_scored", t, step.edges_scored, N_a * N_e))
        checks.append(BoundCheck("messages_vs_scored", t, step.messages, step.edges_scored))
        if graph is not None:
            pairs = {(int(graph.src[e]), int(graph.dst[e])) for e in step.cflow_edges.tolist()}
            checks.append(BoundCheck("message_pairs", t, len(pairs), N_a * N_s))
        checks.append(BoundCheck("visited_growth", t, step.visited_growth, N_s + N_a))
    return checks
