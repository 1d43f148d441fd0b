from __future__ import annotations

import math

import numpy as np
import pytest

from kgflow import tensor as T
from kgflow.aflow import (AttentionVector, ContractError, PairLogits, build_transition, edge_logits,
                          propagate_attention, select_topk)
from kgflow.cflow import QueryBatch, SparseNodeStates, attend_node_state, cflow_step, init_cflow
from kgflow.controller import Horizons, complexity_report, run_batch, run_query
from kgflow.graph import EdgeSample, GraphView, build_graph
from kgflow.model import init_params, params_from_arrays
from kgflow.nn import Dense
from kgflow.tensor import Tensor
from kgflow.uflow import run_uflow, uflow_step

from .conftest import random_triples


def const_params(n_ent, n_rel, D, Da, value=1.0, attend=None):
    shapes = init_params(n_ent, n_rel, D, Da, seed=0).named()
    arrays = {k: np.full(v.shape, value, dtype=np.float64) for k, v in shapes.items()}
    for k in arrays:
        if k.endswith(".bias"):
            arrays[k][:] = 0.0
    if attend is not None:
        arrays["cflow.attend"] = np.asarray(attend, dtype=np.float64)
    return params_from_arrays(arrays)


def zero_params(n_ent, n_rel, D, Da, seed=0):
    p = init_params(n_ent, n_rel, D, Da, seed=seed, dtype=np.float64)
    arrays = {k: (v.data if k in ("entity_emb", "relation_emb") else np.zeros_like(v.data))
              for k, v in p.named().items()}
    return params_from_arrays(arrays)


# ------------------------------------------------------------------ U-Flow

def test_uflow_scalar_hand_trace():
    g = build_graph(np.array([[0, 0, 1]]), 2, 1, add_inverse=False, add_self_loops=False)
    p = const_params(2, 1, 1, 1)
    out = uflow_step(p.entity_emb, p, EdgeSample(np.array([0]), "global"), g).data
    m = math.tanh(3.0)
    assert m == pytest.approx(0.99505, abs=1e-5)
    assert out[1, 0] == pytest.approx(1 + math.tanh(m + 2), abs=1e-9)
    # tanh(2.99505) = 0.99500, so the residual state is 1.99501
    assert out[1, 0] == pytest.approx(1.99501, abs=1e-5)
    # node 0 receives nothing: zero aggregate, h + tanh(0 + 1 + 1)
    assert out[0, 0] == pytest.approx(1 + math.tanh(2.0), abs=1e-9)


def test_uflow_zero_parameters_keep_states(small_graph):
    g, _ = small_graph
    p = zero_params(20, g.num_relations, 8, 4)
    u = run_uflow(GraphView.full(g), p, 3, 30, np.random.default_rng(0))
    np.testing.assert_array_equal(u.states.data, p.entity_emb.data)


def test_uflow_empty_sample_still_updates(small_graph, small_params):
    g, _ = small_graph
    out = uflow_step(small_params.entity_emb, small_params, EdgeSample(np.zeros(0, dtype=np.int64), "global"), g)
    assert not np.array_equal(out.data, small_params.entity_emb.data)


def test_uflow_zero_steps_is_embedding(small_graph, small_params):
    g, _ = small_graph
    u = run_uflow(GraphView.full(g), small_params, 0, 100, np.random.default_rng(0))
    assert u.states is small_params.entity_emb


def test_uflow_redraws_each_step_and_is_deterministic(small_graph, small_params):
    g, _ = small_graph
    view = GraphView.full(g)
    a = run_uflow(view, small_params, 2, 10, np.random.default_rng(5))
    b = run_uflow(view, small_params, 2, 10, np.random.default_rng(5))
    assert len(a.samples) == 2 and all(s.edge_ids.size == 10 for s in a.samples)
    assert not np.array_equal(a.samples[0].edge_ids, a.samples[1].edge_ids)
    assert a.states.data.tobytes() == b.states.data.tobytes()


def test_uflow_rejects_bad_edge_id(small_graph, small_params):
    g, _ = small_graph
    with pytest.raises(IndexError):
        uflow_step(small_params.entity_emb, small_params, EdgeSample(np.array([g.num_edges]), "global"), g)


def test_aggregate_grows_with_sqrt_of_count():
    ones = Tensor(np.ones((9, 2)))
    agg = T.segment_sum_scaled(ones, np.zeros(9, dtype=np.int64), 1).data
    assert agg[0, 0] == pytest.approx(3.0)


# ------------------------------------------------------------------ C-Flow

def _query(p, heads, rels):
    heads, rels = np.asarray(heads), np.asarray(rels)
    return QueryBatch(heads, rels, T.gather(p.entity_emb, heads), T.gather(p.relation_emb, rels))


def test_init_cflow_singleton(small_params):
    q = _query(small_params, [3, 7], [0, 1])
    s = init_cflow(q, small_params.entity_emb, 20)
    assert s.keys.tolist() == [3, 27]
    np.testing.assert_array_equal(s.states.data, small_params.entity_emb.data[[3, 7]])
    assert set(s.for_query(0)) == {3} and set(s.for_query(1)) == {7}


def test_attend_node_state_examples():
    h = Tensor(np.array([[1.0, -2.0]]))
    assert np.all(attend_node_state(Tensor(np.array([0.0])), h, Tensor(np.eye(2))).data == 0)
    np.testing.assert_allclose(attend_node_state(Tensor(np.array([1.0])), h, Tensor(np.eye(2))).data, h.data)
    np.testing.assert_allclose(attend_node_state(Tensor(np.array([0.5])), h, Tensor(2 * np.eye(2))).data, h.data)


def test_cflow_scalar_hand_trace():
    p = const_params(2, 1, 1, 1, attend=[[0.0]])
    q = _query(p, [0], [0])
    states = init_cflow(q, p.entity_emb, 2)
    attention = AttentionVector(np.array([0, 1]), Tensor(np.array([0.5, 0.5])), 2, 1)
    out = cflow_step(states, q, attention, np.array([0]), np.array([0]), np.array([1]), np.array([0]),
                     np.array([0, 1]), p.entity_emb, p.relation_emb, p.cflow)
    m = math.tanh(4.0)
    assert m == pytest.approx(0.99933, abs=1e-5)
    # new node x: zero state, aggregate m, eta 0, q_head = q_rel = 1
    assert out.for_query(0)[1][0] == pytest.approx(math.tanh(m + 2.0), abs=1e-9)


def test_cflow_empty_edges_still_grows_visited(small_params):
    q = _query(small_params, [2], [0])
    states = init_cflow(q, small_params.entity_emb, 20)
    attention = AttentionVector(np.array([2, 5]), Tensor(np.array([0.3, 0.7], dtype=np.float32)), 20, 1)
    empty = np.zeros(0, dtype=np.int64)
    out = cflow_step(states, q, attention, empty, empty, empty, np.array([2]), np.array([2, 5]),
                     small_params.entity_emb, small_params.relation_emb, small_params.cflow)
    assert out.keys.tolist() == [2, 5]
    assert np.any(out.states.data[1] != 0)


def test_cflow_zero_parameters_keep_states(small_params):
    p = zero_params(20, small_params.num_relations, 8, 4)
    q = _query(p, [2], [0])
    states = init_cflow(q, p.entity_emb, 20)
    attention = AttentionVector(np.array([2, 5]), Tensor(np.array([0.5, 0.5])), 20, 1)
    out = cflow_step(states, q, attention, np.array([2]), np.array([0]), np.array([5]), np.array([2]),
                     np.array([2, 5]), p.entity_emb, p.relation_emb, p.cflow)
    np.testing.assert_array_equal(out.states.data[0], states.states.data[0])
    assert np.all(out.states.data[1] == 0)


def test_cflow_rejects_edges_outside_horizons(small_params):
    q = _query(small_params, [2], [0])
    states = init_cflow(q, small_params.entity_emb, 20)
    attention = AttentionVector(np.array([2, 5]), Tensor(np.array([0.5, 0.5], dtype=np.float32)), 20, 1)
    args = (small_params.entity_emb, small_params.relation_emb, small_params.cflow)
    with pytest.raises(ContractError):
        cflow_step(states, q, attention, np.array([5]), np.array([0]), np.array([2]), np.array([2]),
                   np.array([2, 5]), *args)
    with pytest.raises(ContractError):
        cflow_step(states, q, attention, np.array([2]), np.array([0]), np.array([9]), np.array([2]),
                   np.array([2, 5]), *args)


def test_cflow_messages_depend_on_query_relation(small_params):
    p = small_params
    states = init_cflow(_query(p, [2], [0]), p.entity_emb, 20)
    attention = AttentionVector(np.array([2, 5]), Tensor(np.array([0.5, 0.5], dtype=np.float32)), 20, 1)
    outs = []
    for rel in (0, 1):
        q = _query(p, [2], [rel])
        outs.append(cflow_step(states, q, attention, np.array([2]), np.array([0]), np.array([5]), np.array([2]),
                               np.array([2, 5]), p.entity_emb, p.relation_emb, p.cflow).states.data)
    assert not np.allclose(outs[0], outs[1])


def test_seen_scope_leaves_other_visited_nodes(small_params):
    p = small_params
    q = _query(p, [2], [0])
    states = SparseNodeStates(np.array([2, 4]), T.gather(p.entity_emb, np.array([2, 4])), 20)
    attention = AttentionVector(np.array([2, 5]), Tensor(np.array([0.5, 0.5], dtype=np.float32)), 20, 1)
    out = cflow_step(states, q, attention, np.array([2]), np.array([0]), np.array([5]), np.array([2]),
                     np.array([2, 5]), p.entity_emb, p.relation_emb, p.cflow, update_scope="seen")
    np.testing.assert_array_equal(out.for_query(0)[4], p.entity_emb.data[4])
    full = cflow_step(states, q, attention, np.array([2]), np.array([0]), np.array([5]), np.array([2]),
                      np.array([2, 5]), p.entity_emb, p.relation_emb, p.cflow)
    assert not np.array_equal(full.for_query(0)[4], p.entity_emb.data[4])


# ------------------------------------------------------------------ A-Flow

def _pairs(src, dst, logits, n):
    return PairLogits(np.asarray(src), np.asarray(dst), Tensor(np.asarray(logits, dtype=np.float64)),
                      np.arange(len(src)))


def test_edge_logit_scalar_hand_trace():
    one = Dense(Tensor(np.zeros((4, 1))), Tensor(np.ones(1)))
    from kgflow.model import AFlowParams
    params = AFlowParams(one, one, one, one, Tensor(np.ones((1, 1))), Tensor(np.ones((1, 1))))
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 1)))
    c = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 3)))
    assert edge_logits(x, x, x, c, params).data[0] == pytest.approx(2.0)


def test_zero_theta_gives_uniform_transitions(small_graph):
    g, _ = small_graph
    p = init_params(20, g.num_relations, 8, 4, seed=0)
    p.aflow.theta_cc.data[:] = 0
    p.aflow.theta_cu.data[:] = 0
    u = run_uflow(GraphView.full(g), p, 1, 50, np.random.default_rng(0))
    res = run_batch(GraphView.full(g), [0], [0], p, Horizons(50, 50, 50, 2, 1, 8, 4), u, [np.random.default_rng(1)],
                    keep_transitions=True)
    for tr in res.transitions:
        for grp in range(tr.sources.shape[0]):
            w = tr.weights.data[tr.source_group == grp]
            np.testing.assert_allclose(w, 1.0 / w.size, atol=1e-6)


def test_parallel_relations_sum_their_logits():
    from kgflow.aflow import score_edges
    src = np.array([0, 0, 0])
    dst = np.array([1, 1, 2])
    pairs = score_edges(src, dst, Tensor(np.array([0.7, 0.7, 0.1])), 5)
    assert pairs.dst_keys.tolist() == [1, 2]
    np.testing.assert_allclose(pairs.logits.data, [1.4, 0.1])


def test_build_transition_examples():
    t = build_transition(_pairs([0], [3], [5.0], 4), 4)
    assert t.weights.data.tolist() == [1.0]
    t = build_transition(_pairs([0] * 4, [0, 1, 2, 3], [2.0] * 4, 4), 4)
    np.testing.assert_allclose(t.weights.data, 0.25)
    t = build_transition(_pairs([1, 1], [0, 2], [0.0, math.log(3)], 4), 4)
    np.testing.assert_allclose(t.weights.data, [0.25, 0.75])


def test_propagation_examples():
    a0 = AttentionVector.one_hot([0], 3, dtype=np.float64)
    t = build_transition(_pairs([0, 0], [0, 1], [0.0, 0.0], 3), 3)
    a1 = propagate_attention(t, a0, np.array([0]), 1)
    assert a1.for_query(0) == pytest.approx({0: 0.5, 1: 0.5})

    a = AttentionVector(np.array([0, 1]), Tensor(np.array([0.8, 0.2])), 4, 1)
    t = build_transition(_pairs([0, 0], [2, 3], [0.0, 0.0], 4), 4)
    out = propagate_attention(t, a, np.array([0]), 1)
    assert out.for_query(0) == pytest.approx({2: 0.5, 3: 0.5})


def test_propagation_rejects_foreign_sources():
    a = AttentionVector(np.array([0, 1]), Tensor(np.array([0.8, 0.2])), 4, 1)
    t = build_transition(_pairs([1], [2], [0.0], 4), 4)
    with pytest.raises(ContractError):
        propagate_attention(t, a, np.array([0]), 1)


def test_shift_invariance_of_transition():
    logits = np.array([0.3, -1.2, 2.0, 0.5, 0.1])
    src = [0, 0, 0, 1, 1]
    dst = [0, 1, 2, 1, 3]
    base = build_transition(_pairs(src, dst, logits, 4), 4).weights.data
    shifted = logits.copy()
    shifted[:3] += 17.0
    np.testing.assert_allclose(build_transition(_pairs(src, dst, shifted, 4), 4).weights.data, base, atol=1e-6)


def test_select_topk_examples():
    one = AttentionVector(np.array([3]), Tensor(np.array([1.0])), 10)
    assert one.keys[select_topk(one, 5)].tolist() == [3]
    a = AttentionVector(np.array([0, 1, 2]), Tensor(np.array([0.4, 0.3, 0.3])), 10)
    assert a.keys[select_topk(a, 2)].tolist() == [0, 1]
    rng = np.random.default_rng(0)
    keys = np.sort(rng.choice(1000, 400, replace=False))
    mass = rng.choice([0.1, 0.2, 0.3], 400)
    big = AttentionVector(keys, Tensor(mass / mass.sum()), 1000)
    seen = select_topk(big, 200)
    attended = select_topk(big, 20)
    assert np.array_equal(seen[:20], attended)


# ------------------------------------------------------------------ controller

def test_absorbing_self_loop_head():
    g = build_graph(np.array([[1, 0, 2]]), 3, 1)
    p = init_params(3, g.num_relations, 4, 2, seed=0)
    u = run_uflow(GraphView.full(g), p, 1, 10, np.random.default_rng(0))
    r = run_query(GraphView.full(g), 0, 0, p, Horizons(5, 5, 5, 4, 1, 4, 2), u, np.random.default_rng(0))
    assert r.attention == pytest.approx({0: 1.0})
    assert r.trace.visited.tolist() == [0]


def test_chain_reaches_end_in_two_steps():
    g = build_graph(np.array([[0, 0, 1], [1, 0, 2]]), 3, 1, add_inverse=False, add_self_loops=False)
    p = init_params(3, g.num_relations, 4, 2, seed=0)
    u = run_uflow(GraphView.full(g), p, 1, 10, np.random.default_rng(0))
    r = run_query(GraphView.full(g), 0, 0, p, Horizons(5, 5, 5, 2, 1, 4, 2), u, np.random.default_rng(0))
    assert r.attention == pytest.approx({2: 1.0})
    assert r.trace.visited.tolist() == [0, 1, 2]
    assert r.trace.steps[0].attended.tolist() == [0]


def test_complete_graph_cap_is_tight():
    n = 25
    tr = np.array([(i, 0, j) for i in range(n) for j in range(n) if i != j])
    g = build_graph(tr, n, 1, add_inverse=False, add_self_loops=True)
    p = init_params(n, g.num_relations, 4, 2, seed=0)
    h = Horizons(10, 10, 5, 4, 0, 4, 2)
    r = run_query(GraphView.full(g), 0, 0, p, h, run_uflow(GraphView.full(g), p, 0, 1, np.random.default_rng(0)),
                  np.random.default_rng(1))
    assert [s.edges_scored for s in r.trace.steps] == [10, 50, 50, 50]
    assert all(c.passed for c in complexity_report(r.trace, h, g))


def test_single_attended_node_bounds_messages(small_graph, small_params):
    g, _ = small_graph
    h = Horizons(20, 6, 1, 4, 1, 8, 4)
    u = run_uflow(GraphView.full(g), small_params, 1, 50, np.random.default_rng(0))
    r = run_query(GraphView.full(g), 1, 0, small_params, h, u, np.random.default_rng(2))
    for step in r.trace.steps:
        assert len({(int(g.src[e]), int(g.dst[e])) for e in step.cflow_edges}) <= h.N_s


def test_trace_invariants(small_graph, small_params):
    g, _ = small_graph
    h = Horizons(3, 6, 3, 5, 1, 8, 4)
    view = GraphView.full(g)
    u = run_uflow(view, small_params, 1, 50, np.random.default_rng(0))
    res = run_batch(view, [0, 4, 9], [0, 1, 2], small_params, h, u, [np.random.default_rng(i) for i in range(3)])
    totals = res.attention.totals(3)
    np.testing.assert_allclose(totals, 1.0, atol=1e-6)
    for tr in res.traces:
        visited = {tr.head}
        prev_seen = {tr.head}
        for step in tr.steps:
            assert set(step.attended.tolist()) <= prev_seen
            now = visited | set(step.seen.tolist())
            assert step.visited_size == len(now)
            visited = now
            prev_seen = set(step.seen.tolist())
        assert set(tr.visited.tolist()) == visited
    assert res.states.states.shape[0] == sum(len(t.visited) for t in res.traces)


def test_query_isolation_and_batch_schedule(small_graph, small_params):
    g, _ = small_graph
    h = Horizons(4, 8, 4, 3, 1, 8, 4)
    view = GraphView.full(g)
    u = run_uflow(view, small_params, 1, 50, np.random.default_rng(0))
    heads, rels = [0, 4, 9], [0, 1, 2]
    batch = run_batch(view, heads, rels, small_params, h, u, [np.random.default_rng(10 + i) for i in range(3)])
    swapped = run_batch(view, heads[::-1], rels[::-1], small_params, h, u,
                        [np.random.default_rng(10 + i) for i in (2, 1, 0)])
    single = [run_query(view, hd, rl, small_params, h, u, np.random.default_rng(10 + i))
              for i, (hd, rl) in enumerate(zip(heads, rels))]
    for b, qr in enumerate(batch.results()):
        other = swapped.results()[2 - b]
        assert qr.attention.keys() == other.attention.keys() == single[b].attention.keys()
        for k, v in qr.attention.items():
            assert v == pytest.approx(other.attention[k], abs=1e-6)
            assert v == pytest.approx(single[b].attention[k], abs=1e-6)
        assert qr.trace.visited.tolist() == single[b].trace.visited.tolist()


def test_run_is_deterministic(small_graph, small_params):
    g, _ = small_graph
    h = Horizons(4, 8, 4, 3, 1, 8, 4)
    view = GraphView.full(g)

    def once():
        u = run_uflow(view, small_params, 1, 30, np.random.default_rng(0))
        return run_batch(view, [0, 4], [0, 1], small_params, h, u, [np.random.default_rng(i) for i in range(2)])

    a, b = once(), once()
    assert a.attention.mass.data.tobytes() == b.attention.mass.data.tobytes()
    assert np.array_equal(a.attention.keys, b.attention.keys)


def test_horizon_validation():
    with pytest.raises(ValueError):
        Horizons(10, 5, 6)
    with pytest.raises(ValueError):
        Horizons(n_steps_of_c_flow=1)
    with pytest.raises(ValueError):
        Horizons(max_sampled_edges_per_node=0)


def test_random_graph_bounds_hold():
    rng = np.random.default_rng(11)
    for trial in range(20):
        n = int(rng.integers(5, 40))
        g = build_graph(random_triples(rng, n, 3, int(rng.integers(n, 4 * n))), n, 3)
        N_a = int(rng.integers(1, 6))
        h = Horizons(int(rng.integers(1, 8)), int(rng.integers(N_a, 12)), N_a, int(rng.integers(2, 6)), 1, 4, 2)
        p = init_params(n, g.num_relations, 4, 2, seed=trial)
        view = GraphView.full(g)
        u = run_uflow(view, p, 1, 50, rng)
        r = run_query(view, int(rng.integers(0, n)), 0, p, h, u, rng)
        assert all(c.passed for c in complexity_report(r.trace, h, g))
