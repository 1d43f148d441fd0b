"""Query-conditioned message passing over each query's visited nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aflow import AttentionVector, ContractError
from .model import CFlowParams
from .nn import mlp2_forward
from .tensor import Tensor


@dataclass
class QueryBatch:
    heads: np.ndarray
    rels: np.ndarray
    q_head: Tensor  # (B, D) head embeddings
    q_rel: Tensor  # (B, D) relation embeddings
    tails: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.heads.shape[0])


@dataclass
class SparseNodeStates:
    """Conscious states for visited nodes only, keyed like attention."""

    keys: np.ndarray  # sorted, query * num_nodes + node
    states: Tensor  # (len(keys), D)
    num_nodes: int

    @property
    def nodes(self) -> np.ndarray:
        return self.keys % self.num_nodes

    @property
    def queries(self) -> np.ndarray:
        return self.keys // self.num_nodes

    def rows_for(self, keys: np.ndarray) -> np.ndarray:
        """Row index of each key; missing keys map to ``len(self.keys)`` (the zero row)."""
        n = self.keys.shape[0]
        if n == 0:
            return np.zeros(len(keys), dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.keys, keys), n - 1)
        return np.where(self.keys[pos] == keys, pos, n)

    def with_zero_row(self) -> Tensor:
        zero = Tensor(np.zeros((1, self.states.shape[1]), dtype=self.states.dtype))
        return T.concat([self.states, zero], axis=0)

    def for_query(self, b: int) -> dict[int, np.ndarray]:
        sel = self.queries == b
        return {int(n): row for n, row in zip(self.nodes[sel], self.states.data[sel])}


def init_cflow(query: QueryBatch, ustates: Tensor, num_nodes: int) -> SparseNodeStates:
    """Visited set ``{head}`` per query, initialised from the unconscious state."""
    keys = np.arange(query.size, dtype=np.int64) * num_nodes + query.heads
    return SparseNodeStates(keys, T.gather(ustates, query.heads), num_nodes)


def attend_node_state(attention: Tensor, ustates: Tensor, attend: Tensor) -> Tensor:
    """Rows ``a_v * (h~_v A)`` for aligned attention values and unconscious states."""
    projected = T.matmul(ustates, attend)
    return T.reshape(attention, (-1, 1)) * projected


def edge_context(rels: np.ndarray, queries: np.ndarray, relation_emb: Tensor, query: QueryBatch) -> Tensor:
    """``c_r = [e_r, q_head, q_rel]`` per edge."""
    return T.concat([T.gather(relation_emb, rels), T.gather(query.q_head, queries), T.gather(query.q_rel, queries)])


def cflow_step(states: SparseNodeStates, query: QueryBatch, attention: AttentionVector,
               edge_src: np.ndarray, edge_rel: np.ndarray, edge_dst: np.ndarray,
               attended_keys: np.ndarray, seen_keys: np.ndarray, ustates: Tensor,
               relation_emb: Tensor, params: CFlowParams, update_scope: str = "visited") -> SparseNodeStates:
    """Advance conscious states by one step.

    ``edge_src``/``edge_dst`` are attention keys of the selected edges, which
    must run from attended nodes into seen nodes.  The new visited set is the
    old one plus the seen nodes; every visited node gets the residual update
    (``update_scope="seen"`` restricts it to the seen nodes).
    """
    N = states.num_nodes
    if edge_src.size:
        if not np.all(np.isin(edge_src, attended_keys)):
            raise ContractError("C-Flow edge leaves a node outside the attended set")
        if not np.all(np.isin(edge_dst, seen_keys)):
            raise ContractError("C-Flow edge enters a node outside the seen set")
    if not np.all(np.isin(attended_keys, states.keys)):
        raise ContractError("attended node has no conscious state")

    new_keys = np.union1d(states.keys, seen_keys)
    padded = states.with_zero_row()
    h_prev = T.gather(padded, states.rows_for(new_keys))

    q_of_edge = edge_src // N
    c_r = edge_context(edge_rel, q_of_edge, relation_emb, query)
    msg_in = T.concat([T.gather(padded, states.rows_for(edge_src)), c_r, T.gather(padded, states.rows_for(edge_dst))])
    messages = mlp2_forward(msg_in, params.message)
    agg = T.segment_sum_scaled(messages, np.searchsorted(new_keys, edge_dst), new_keys.shape[0])

    a_pad = T.concat([attention.mass, Tensor(np.zeros(1, dtype=attention.mass.dtype))])
    a_rows = SparseNodeStates(attention.keys, attention.mass, N).rows_for(new_keys)
    att = T.gather(a_pad, a_rows)
    eta = attend_node_state(att, T.gather(ustates, new_keys % N), params.attend)

    q_of_node = new_keys // N
    upd_in = T.concat([agg, h_prev, eta, T.gather(query.q_head, q_of_node), T.gather(query.q_rel, q_of_node)])
    delta = mlp2_forward(upd_in, params.update)
    if update_scope == "seen":
        gate = np.isin(new_keys, seen_keys).astype(delta.dtype).reshape(-1, 1)
        delta = delta * gate
    elif update_scope != "visited":
        raise ValueError(f"unknown update scope {update_scope!r}")
    return SparseNodeStates(new_keys, h_prev + delta, N)
