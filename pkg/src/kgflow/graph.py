"""Immutable knowledge-graph storage, edge sampling and batch masking.

Edges live in CSR order: edge ids are positions in the arrays sorted by
source node, so the out-edges of node ``v`` are ``offsets[v]:offsets[v+1]``.
With augmentation, relation ``r`` has inverse ``r + R`` and the self-loop
relation is ``2R`` where ``R`` is the raw relation count.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np

NO_EDGE = -1


class TripleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Triple:
    head: int
    rel: int
    tail: int


@dataclass
class Vocab:
    """String <-> dense id mapping in first-appearance order."""

    names: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.names)
            self.index[name] = idx
            self.names.append(name)
        return idx

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    def __contains__(self, name: str) -> bool:
        return name in self.index


def parse_triple_lines(stream: IO[str] | IO[bytes] | Iterable[str], entities: Vocab, relations: Vocab,
                       extend: bool = True, source: str = "<stream>") -> np.ndarray:
    """Parse ``head<TAB>relation<TAB>tail`` lines into an (n, 3) int64 array.

    With ``extend=False`` unseen names raise ``KeyError`` instead of growing
    the vocabularies.
    """
    rows = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.rstrip("\n").rstrip("\r")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise TripleFormatError(f"{source}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        h, r, t = parts
        if extend:
            rows.append((entities.add(h), relations.add(r), entities.add(t)))
        else:
            rows.append((entities[h], relations[r], entities[t]))
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def load_triples(source, entities: Vocab | None = None, relations: Vocab | None = None):
    """Read a triple file (path, text/byte stream) and build vocabularies.

    Returns ``(triples, entities, relations)``.  Pass existing vocabularies to
    keep ids consistent across splits.
    """
    entities = entities if entities is not None else Vocab()
    relations = relations if relations is not None else Vocab()
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            triples = parse_triple_lines(fh, entities, relations, source=str(source))
    else:
        triples = parse_triple_lines(source, entities, relations)
    return triples, entities, relations


@dataclass(frozen=True, eq=False)
class Graph:
    num_entities: int
    num_raw_relations: int
    num_relations: int
    offsets: np.ndarray  # (num_entities + 1,)
    src: np.ndarray  # per edge, non-decreasing
    rel: np.ndarray
    dst: np.ndarray
    inverse: np.ndarray  # edge id of the inverse edge, self-loops map to themselves, NO_EDGE when absent
    self_loop: np.ndarray  # per node, its self-loop edge id or NO_EDGE
    has_inverse: bool
    has_self_loops: bool

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def out_degree(self, node: int) -> int:
        return int(self.offsets[node + 1] - self.offsets[node])

    def inverse_relation(self, rel: int) -> int:
        R = self.num_raw_relations
        if rel < R:
            return rel + R
        if rel < 2 * R:
            return rel - R
        return rel

    @property
    def self_loop_relation(self) -> int:
        return 2 * self.num_raw_relations if self.has_inverse else self.num_raw_relations

    def is_self_loop(self, edge_ids) -> np.ndarray:
        if not self.has_self_loops:
            return np.zeros(np.shape(edge_ids), dtype=bool)
        return self.rel[edge_ids] == self.self_loop_relation

    @cached_property
    def _triple_index(self) -> dict[tuple[int, int, int], list[int]]:
        index: dict[tuple[int, int, int], list[int]] = {}
        for e, key in enumerate(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist())):
            index.setdefault(key, []).append(e)
        return index

    @cached_property
    def _pair_index(self) -> dict[tuple[int, int], list[int]]:
        index: dict[tuple[int, int], list[int]] = {}
        loops = self.is_self_loop(np.arange(self.num_edges))
        for e, (a, b) in enumerate(zip(self.src.tolist(), self.dst.tolist())):
            if loops[e]:
                continue
            key = (a, b) if a <= b else (b, a)
            index.setdefault(key, []).append(e)
        return index

    def find_edges(self, head: int, rel: int, tail: int) -> list[int]:
        return list(self._triple_index.get((int(head), int(rel), int(tail)), ()))

    def edges_joining(self, a: int, b: int) -> list[int]:
        """Non-self-loop edges between ``a`` and ``b`` in either direction."""
        key = (int(a), int(b)) if a <= b else (int(b), int(a))
        return list(self._pair_index.get(key, ()))


def build_graph(triples: np.ndarray, num_entities: int, num_relations: int,
                add_inverse: bool = True, add_self_loops: bool = True) -> Graph:
    """CSR graph over raw triples plus optional inverse and self-loop edges."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if triples.size and (triples[:, [0, 2]].max() >= num_entities or triples[:, 1].max() >= num_relations
                         or triples.min() < 0):
        raise IndexError("triple id outside vocabulary bounds")
    n = triples.shape[0]
    R = num_relations
    heads, rels, tails = triples[:, 0], triples[:, 1], triples[:, 2]
    src_parts, rel_parts, dst_parts = [heads], [rels], [tails]
    if add_inverse:
        src_parts.append(tails)
        rel_parts.append(rels + R)
        dst_parts.append(heads)
    if add_self_loops:
        nodes = np.arange(num_entities, dtype=np.int64)
        src_parts.append(nodes)
        rel_parts.append(np.full(num_entities, 2 * R if add_inverse else R, dtype=np.int64))
        dst_parts.append(nodes)
    src = np.concatenate(src_parts)
    rel = np.concatenate(rel_parts)
    dst = np.concatenate(dst_parts)

    # position in the unsorted list -> paired position
    raw_pair = np.full(src.shape[0], NO_EDGE, dtype=np.int64)
    if add_inverse:
        raw_pair[:n] = np.arange(n, 2 * n)
        raw_pair[n:2 * n] = np.arange(n)
    if add_self_loops:
        start = 2 * n if add_inverse else n
        raw_pair[start:] = np.arange(start, start + num_entities)

    order = np.argsort(src, kind="stable")
    position = np.empty_like(order)
    position[order] = np.arange(order.shape[0])
    inverse = np.where(raw_pair[order] >= 0, position[np.maximum(raw_pair[order], 0)], NO_EDGE)

    src, rel, dst = src[order], rel[order], dst[order]
    counts = np.bincount(src, minlength=num_entities) if src.size else np.zeros(num_entities, dtype=np.int64)
    offsets = np.zeros(num_entities + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    self_loop = np.full(num_entities, NO_EDGE, dtype=np.int64)
    if add_self_loops:
        loop_rel = 2 * R if add_inverse else R
        loop_ids = np.flatnonzero(rel == loop_rel)
        self_loop[src[loop_ids]] = loop_ids

    total_rel = (2 * R if add_inverse else R) + (1 if add_self_loops else 0)
    for arr in (offsets, src, rel, dst, inverse, self_loop):
        arr.setflags(write=False)
    return Graph(num_entities, R, total_rel, offsets, src, rel, dst, inverse, self_loop,
                 add_inverse, add_self_loops)


@dataclass(frozen=True, eq=False)
class GraphView:
    """A graph with a set of edges hidden from every query."""

    graph: Graph
    masked: np.ndarray  # bool per edge

    @classmethod
    def full(cls, graph: Graph) -> "GraphView":
        mask = np.zeros(graph.num_edges, dtype=bool)
        mask.setflags(write=False)
        return cls(graph, mask)

    @property
    def masked_ids(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    def out_edges(self, node: int) -> np.ndarray:
        lo, hi = self.graph.offsets[node], self.graph.offsets[node + 1]
        ids = np.arange(lo, hi)
        return ids[~self.masked[lo:hi]]


@dataclass
class EdgeSample:
    edge_ids: np.ndarray
    provenance: str  # "global" | "per-node"
    sources: np.ndarray | None = None
    counts: np.ndarray | None = None  # per source, aligned with ``sources``


def _partial_fisher_yates(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First ``k`` positions of a uniformly shuffled ``range(n)``."""
    perm = np.arange(n)
    draws = rng.random(k)
    for i in range(k):
        j = i + int(draws[i] * (n - i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]


def sample_edges_global(view: GraphView, k: int, rng: np.random.Generator) -> EdgeSample:
    if k < 0:
        raise ValueError("sample size must be non-negative")
    available = np.flatnonzero(~view.masked)
    if k >= available.shape[0]:
        return EdgeSample(available, "global")
    picked = available[np.sort(_partial_fisher_yates(available.shape[0], k, rng))]
    return EdgeSample(picked, "global")


def sample_neighbors(view: GraphView, sources: Sequence[int] | np.ndarray, max_per_node: int,
                     rng: np.random.Generator) -> EdgeSample:
    """Uniformly sample at most ``max_per_node`` unmasked out-edges per source."""
    sources = np.asarray(sources, dtype=np.int64).reshape(-1)
    g = view.graph
    chunks = []
    counts = np.zeros(sources.shape[0], dtype=np.int64)
    for i, v in enumerate(sources.tolist()):
        lo, hi = int(g.offsets[v]), int(g.offsets[v + 1])
        ids = np.arange(lo, hi)
        mask = view.masked[lo:hi]
        if mask.any():
            ids = ids[~mask]
        if ids.shape[0] > max_per_node:
            ids = np.sort(ids[_partial_fisher_yates(ids.shape[0], max_per_node, rng)])
        counts[i] = ids.shape[0]
        chunks.append(ids)
    edge_ids = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return EdgeSample(edge_ids, "per-node", sources, counts)


def mask_batch_edges(graph: Graph, batch: np.ndarray, mode: str = "standard") -> GraphView:
    """Hide the edges a training batch must not see.

    ``standard`` hides each batch triple and its inverse; ``cutoff`` hides
    every edge joining a batch head-tail pair in either direction.
    Self-loops are never hidden.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    mask = np.zeros(graph.num_edges, dtype=bool)
    if mode == "standard":
        for h, r, t in batch.tolist():
            ids = graph.find_edges(h, r, t)
            if not ids:
                raise KeyError(f"triple ({h}, {r}, {t}) is not in the graph")
            for e in ids:
                mask[e] = True
                inv = graph.inverse[e]
                if inv != NO_EDGE:
                    mask[inv] = True
    elif mode == "cutoff":
        for h, _, t in batch.tolist():
            for e in graph.edges_joining(h, t):
                mask[e] = True
    else:
        raise ValueError(f"unknown masking mode {mode!r}")
    if graph.has_self_loops:
        mask[graph.self_loop[graph.self_loop >= 0]] = False
    mask.setflags(write=False)
    return GraphView(graph, mask)


def edges_between(view: GraphView, from_nodes, to_nodes, within: EdgeSample) -> np.ndarray:
    """Edge ids of ``within`` whose source is in ``from_nodes`` and target in ``to_nodes``."""
    ids = within.edge_ids
    g = view.graph
    keep = np.isin(g.src[ids], np.asarray(list(from_nodes), dtype=np.int64)) & \
        np.isin(g.dst[ids], np.asarray(list(to_nodes), dtype=np.int64)) & ~view.masked[ids]
    return ids[keep]


@dataclass
class DatasetStats:
    num_pairs: int
    multi_edge_fraction: float
    mean_shortest_path: float
    reachable: int
    unreachable: int


def _bfs_distances(graph: Graph, start: int, targets: set[int]) -> dict[int, int]:
    dist = {start: 0}
    found = {}
    if start in targets:
        found[start] = 0
    queue = deque([start])
    remaining = len(targets) - len(found)
    while queue and remaining:
        v = queue.popleft()
        d = dist[v] + 1
        for u in graph.dst[graph.offsets[v]:graph.offsets[v + 1]].tolist():
            if u not in dist:
                dist[u] = d
                if u in targets and u not in found:
                    found[u] = d
                    remaining -= 1
                queue.append(u)
    return found


def dataset_stats(graph: Graph, pairs: np.ndarray, raw_triples: np.ndarray | None = None) -> DatasetStats:
    """Multi-edge proportion and mean shortest-path length over test triples.

    ``pairs`` holds (head, rel, tail) rows.  A triple counts as multi-edge
    when another raw edge joins its head and tail in either direction.
    Shortest paths are measured on ``graph`` as built (with its inverse
    edges); unreachable pairs are excluded from the mean and counted.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    R = graph.num_raw_relations
    multi = 0
    for h, r, t in pairs.tolist():
        joining = graph.edges_joining(h, t)
        raw = [e for e in joining if graph.rel[e] < R or not graph.has_inverse]
        own = set(graph.find_edges(h, r, t))
        others = [e for e in raw if e not in own]
        if others:
            multi += 1

    by_head: dict[int, set[int]] = {}
    for h, _, t in pairs.tolist():
        by_head.setdefault(h, set()).add(t)
    dists: dict[tuple[int, int], int] = {}
    for h, tails in by_head.items():
        found = _bfs_distances(graph, h, tails)
        for t, d in found.items():
            dists[(h, t)] = d
    lengths = [dists[(h, t)] for h, _, t in pairs.tolist() if (h, t) in dists]
    n = pairs.shape[0]
    return DatasetStats(
        num_pairs=n,
        multi_edge_fraction=multi / n if n else 0.0,
        mean_shortest_path=float(np.mean(lengths)) if lengths else float("nan"),
        reachable=len(lengths),
        unreachable=n - len(lengths),
    )
