"""Attention scoring, sparse transitions and attention propagation.

Attention for a batch of queries is kept as one sparse vector whose keys
encode ``query * num_nodes + node``; a single query is the batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import AFlowParams
from .nn import mlp1_forward
from .tensor import Tensor


class ContractError(RuntimeError):
    """A caller broke an operation's preconditions."""


class DegeneratePropagationError(ContractError):
    pass


@dataclass
class AttentionVector:
    keys: np.ndarray  # sorted, query * num_nodes + node
    mass: Tensor
    num_nodes: int
    step: int = 0

    @classmethod
    def one_hot(cls, heads, num_nodes: int, dtype=np.float32) -> "AttentionVector":
        heads = np.asarray(heads, dtype=np.int64).reshape(-1)
        keys = np.arange(heads.shape[0], dtype=np.int64) * num_nodes + heads
        return cls(keys, Tensor(np.ones(heads.shape[0], dtype=dtype)), num_nodes, 0)

    @property
    def nodes(self) -> np.ndarray:
        return self.keys % self.num_nodes

    @property
    def queries(self) -> np.ndarray:
        return self.keys // self.num_nodes

    def for_query(self, b: int) -> dict[int, float]:
        lo, hi = np.searchsorted(self.keys, [b * self.num_nodes, (b + 1) * self.num_nodes])
        return {int(k - b * self.num_nodes): float(m) for k, m in zip(self.keys[lo:hi], self.mass.data[lo:hi])}

    def totals(self, num_queries: int) -> np.ndarray:
        return np.bincount(self.queries, weights=self.mass.data.astype(np.float64), minlength=num_queries)


@dataclass
class PairLogits:
    """One logit per (source, target) pair; keys use the attention encoding."""

    src_keys: np.ndarray
    dst_keys: np.ndarray
    logits: Tensor
    edge_pair: np.ndarray  # per scored edge, index of its pair


@dataclass
class SparseTransition:
    src_keys: np.ndarray
    dst_keys: np.ndarray
    weights: Tensor
    source_group: np.ndarray  # per pair, index into ``sources``
    sources: np.ndarray  # unique sorted source keys
    num_nodes: int
    logits: Tensor | None = None  # the pair logits the weights were built from

    def column_sums(self) -> np.ndarray:
        return np.bincount(self.source_group, weights=self.weights.data.astype(np.float64),
                           minlength=self.sources.shape[0])

    def to_dense(self, b: int = 0) -> np.ndarray:
        """Column-stochastic matrix ``M[target, source]`` for query ``b``."""
        n = self.num_nodes
        M = np.zeros((n, n))
        sel = self.src_keys // n == b
        M[self.dst_keys[sel] % n, self.src_keys[sel] % n] = self.weights.data[sel]
        return M


def edge_logits(h_src: Tensor, h_dst: Tensor, u_dst: Tensor, c_r: Tensor, params: AFlowParams) -> Tensor:
    """Per-edge ``alpha_cc + alpha_cu`` bilinear scores."""
    src_cc = mlp1_forward(T.concat([h_src, c_r]), params.src_cc)
    dst_cc = mlp1_forward(T.concat([h_dst, c_r]), params.dst_cc)
    src_cu = mlp1_forward(T.concat([h_src, c_r]), params.src_cu)
    dst_cu = mlp1_forward(T.concat([u_dst, c_r]), params.dst_cu)
    cc = T.sum(T.matmul(src_cc, params.theta_cc) * dst_cc, axis=1)
    cu = T.sum(T.matmul(src_cu, params.theta_cu) * dst_cu, axis=1)
    return cc + cu


def group_pairs(src_keys: np.ndarray, dst_keys: np.ndarray, num_nodes: int):
    """Index each edge by its distinct (source, target) pair.

    Returns ``(edge_pair, pair_src_keys, pair_dst_keys)`` with pairs sorted by
    source key then target node.
    """
    combined = src_keys * num_nodes + dst_keys % num_nodes
    uniq, edge_pair = np.unique(combined, return_inverse=True)
    return edge_pair.reshape(-1), uniq // num_nodes, (uniq // num_nodes) // num_nodes * num_nodes + uniq % num_nodes


def score_edges(src_keys: np.ndarray, dst_keys: np.ndarray, logits_per_edge: Tensor, num_nodes: int) -> PairLogits:
    """Sum per-edge logits over all sampled relations joining the same pair."""
    edge_pair, pair_src, pair_dst = group_pairs(src_keys, dst_keys, num_nodes)
    pair_logits = T.segment_sum(logits_per_edge, edge_pair, pair_src.shape[0])
    return PairLogits(pair_src, pair_dst, pair_logits, edge_pair)


def build_transition(pairs: PairLogits, num_nodes: int) -> SparseTransition:
    """Softmax over each source's sampled targets."""
    sources, group = np.unique(pairs.src_keys, return_inverse=True)
    weights = T.segment_softmax(pairs.logits, group.reshape(-1), sources.shape[0])
    return SparseTransition(pairs.src_keys, pairs.dst_keys, weights, group.reshape(-1), sources, num_nodes,
                            pairs.logits)


def propagate_attention(transition: SparseTransition, attention: AttentionVector,
                        attended_keys: np.ndarray, num_queries: int) -> AttentionVector:
    """Move attended mass along the transition and renormalize per query (L1).

    Mass on nodes outside ``attended_keys`` does not move and is dropped.
    """
    N = attention.num_nodes
    attended_keys = np.asarray(attended_keys, dtype=np.int64)
    if not np.all(np.isin(transition.sources, attended_keys)):
        raise ContractError("transition has sources outside the attended set")
    pos = np.searchsorted(attention.keys, transition.src_keys)
    pos = np.minimum(pos, attention.keys.shape[0] - 1)
    if not np.array_equal(attention.keys[pos], transition.src_keys):
        raise ContractError("transition source carries no attention")
    moved = T.gather(attention.mass, pos) * transition.weights
    new_keys, slot = np.unique(transition.dst_keys, return_inverse=True)
    slot = slot.reshape(-1)
    raw = T.segment_sum(moved, slot, new_keys.shape[0])
    q = new_keys // N
    total = T.segment_sum(raw, q, num_queries)
    live = np.unique(q)
    if np.any(total.data[live] <= 0):
        raise DegeneratePropagationError("attention vanished during propagation")
    mass = raw / T.gather(total, q)
    return AttentionVector(new_keys, mass, N, attention.step + 1)


def select_topk(attention: AttentionVector, k: int) -> np.ndarray:
    """Positions of the ``k`` largest-mass entries per query.

    Ordered by query, then descending mass, then ascending node id, so the
    top ``k1 <= k2`` selection is a prefix of the top ``k2`` one.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    keys = attention.keys
    if keys.size == 0:
        return np.zeros(0, dtype=np.int64)
    q = keys // attention.num_nodes
    node = keys % attention.num_nodes
    order = np.lexsort((node, -attention.mass.data, q))
    qs = q[order]
    rank = np.arange(order.shape[0]) - np.searchsorted(qs, qs, side="left")
    return order[rank < k]
