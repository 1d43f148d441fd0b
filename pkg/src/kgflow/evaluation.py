"""Filtered ranking metrics, MAP against negatives and attention diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .controller import FlowTrace, Horizons, run_batch
from .graph import Graph, GraphView
from .model import ModelParams
from .uflow import run_uflow

TIE_MODES = ("mean", "pessimistic", "optimistic")
EVAL_STREAM = 2**32 - 1  # seed-sequence word separating evaluation draws from training ones


@dataclass
class RankingCase:
    head: int
    rel: int
    scores: np.ndarray  # per entity; absent entities score 0
    tail: int
    filter: set[int] = field(default_factory=set)  # other known answers, never the tail

    def __post_init__(self):
        if self.tail in self.filter:
            raise ValueError("the true tail cannot be in the filter set")


def filtered_rank(case: RankingCase, ties: str = "mean") -> int:
    """Rank of the tail among entities not in the filter set.

    ``mean`` adds half the tied block (rounded up), ``pessimistic`` all of
    it, ``optimistic`` none.
    """
    scores = np.asarray(case.scores)
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[case.tail] = False
    if case.filter:
        keep[np.fromiter(case.filter, dtype=np.int64)] = False
    s = scores[case.tail]
    comp = scores[keep]
    greater = int(np.count_nonzero(comp > s))
    tied = int(np.count_nonzero(comp == s))
    if ties == "mean":
        return 1 + greater + math.ceil(tied / 2)
    if ties == "pessimistic":
        return 1 + greater + tied
    if ties == "optimistic":
        return 1 + greater
    raise ValueError(f"unknown tie mode {ties!r}; expected one of {TIE_MODES}")


def hits_mrr(ranks: Sequence[int]) -> dict[str, float]:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to summarize")
    if np.any(r < 1):
        raise ValueError("ranks must be at least 1")
    return {"H@1": float(np.mean(r <= 1)), "H@3": float(np.mean(r <= 3)), "H@10": float(np.mean(r <= 10)),
            "MRR": float(np.mean(1.0 / r))}


def average_precision(candidates: Sequence[tuple[int, float, bool]]) -> float | None:
    """AP of one query's ``(candidate id, score, is_positive)`` list; ``None`` without positives."""
    ordered = sorted(candidates, key=lambda c: (-c[1], c[0]))
    hits, total = 0, 0.0
    for i, (_, _, positive) in enumerate(ordered, start=1):
        if positive:
            hits += 1
            total += hits / i
    return total / hits if hits else None


def map_with_negatives(cases: Iterable[Sequence[tuple[int, float, bool]]]) -> tuple[float, int]:
    """Mean average precision over cases; returns ``(MAP, skipped)``.

    Cases without a positive are skipped and counted.
    """
    aps, skipped = [], 0
    for case in cases:
        ap = average_precision(case)
        if ap is None:
            skipped += 1
        else:
            aps.append(ap)
    return (float(np.mean(aps)) if aps else float("nan")), skipped


@dataclass
class AttentionDiagnostics:
    entropy: list[float]  # per step t = 0..T
    top1: list[float]
    top3: list[float]
    top5: list[float]


def _entropy(mass: np.ndarray) -> float:
    p = mass[mass > 0]
    return float(-np.sum(p * np.log(p))) if p.size else 0.0


def attention_diagnostics(traces: Sequence[FlowTrace]) -> AttentionDiagnostics:
    """Mean entropy (natural log) and top-1/3/5 share of each step's attention over traces."""
    if not traces:
        raise ValueError("no traces to diagnose")
    n_steps = len(traces[0].attention_per_step)
    if any(len(tr.attention_per_step) != n_steps for tr in traces):
        raise ValueError("traces have different step counts")
    ent = np.zeros(n_steps)
    tops = np.zeros((3, n_steps))
    for tr in traces:
        for t, att in enumerate(tr.attention_per_step):
            mass = np.sort(np.fromiter(att.values(), dtype=np.float64))[::-1]
            total = mass.sum()
            if total > 0:
                mass = mass / total
            ent[t] += _entropy(mass)
            for j, k in enumerate((1, 3, 5)):
                tops[j, t] += mass[:k].sum()
    n = len(traces)
    return AttentionDiagnostics((ent / n).tolist(), (tops[0] / n).tolist(), (tops[1] / n).tolist(),
                                (tops[2] / n).tolist())


# ------------------------------------------------------------------ harness

def both_directions(graph: Graph, triples: np.ndarray) -> np.ndarray:
    """Test queries in both directions when the graph has inverse relations."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if not graph.has_inverse:
        return triples
    inv = np.stack([triples[:, 2], triples[:, 1] + graph.num_raw_relations, triples[:, 0]], axis=1)
    return np.concatenate([triples, inv])


def answer_index(graph: Graph, known: np.ndarray) -> dict[tuple[int, int], set[int]]:
    """``(head, rel) -> tails`` over known raw triples and, with augmentation, their inverses."""
    index: dict[tuple[int, int], set[int]] = {}
    for h, r, t in both_directions(graph, known).tolist():
        index.setdefault((h, r), set()).add(t)
    return index


@dataclass
class EvalReport:
    metrics: dict[str, float]
    ranks: list[int]
    diagnostics: AttentionDiagnostics | None
    traces: list[FlowTrace]
    queries: np.ndarray


def score_queries(graph: Graph, params: ModelParams, horizons: Horizons, queries: np.ndarray, seed: int = 0,
                  batch_size: int = 50, update_scope: str = "visited"):
    """Final attention (dense scores) and traces for each ``(head, rel, ...)`` row."""
    view = GraphView.full(graph)
    ustates = run_uflow(view, params, horizons.n_steps_of_u_flow, horizons.max_sampled_edges_per_step,
                        np.random.default_rng(np.random.SeedSequence([seed, EVAL_STREAM, 2**30])))
    scores, traces = [], []
    for lo in range(0, queries.shape[0], batch_size):
        rows = queries[lo:lo + batch_size]
        rngs = [np.random.default_rng(np.random.SeedSequence([seed, EVAL_STREAM, i]))
                for i in range(lo, lo + rows.shape[0])]
        res = run_batch(view, rows[:, 0], rows[:, 1], params, horizons, ustates, rngs, update_scope=update_scope)
        for qr in res.results():
            scores.append(qr.scores(graph.num_entities))
            traces.append(qr.trace)
    return scores, traces


def evaluate(graph: Graph, params: ModelParams, horizons: Horizons, test: np.ndarray, known: np.ndarray,
             seed: int = 0, batch_size: int = 50, ties: str = "mean", update_scope: str = "visited") -> EvalReport:
    """Filtered H@1/3/10 and MRR over ``test`` in both directions.

    ``known`` holds every true triple (all splits) used for filtering.
    """
    queries = both_directions(graph, test)
    if queries.shape[0] == 0:
        raise ValueError("no test triples")
    answers = answer_index(graph, known)
    scores, traces = score_queries(graph, params, horizons, queries, seed, batch_size, update_scope)
    ranks = []
    for (h, r, t), sc in zip(queries.tolist(), scores):
        filt = answers.get((h, r), set()) - {t}
        ranks.append(filtered_rank(RankingCase(h, r, sc, t, filt), ties))
    metrics = hits_mrr(ranks)
    metrics["queries"] = len(ranks)
    return EvalReport(metrics, ranks, attention_diagnostics(traces), traces, queries)


def evaluate_map(graph: Graph, params: ModelParams, horizons: Horizons, labeled: np.ndarray, seed: int = 0,
                 batch_size: int = 50, update_scope: str = "visited") -> EvalReport:
    """MAP over ``(head, rel, candidate, label)`` rows grouped by query."""
    labeled = np.asarray(labeled, dtype=np.int64).reshape(-1, 4)
    keys = sorted({(h, r) for h, r, _, _ in labeled.tolist()})
    queries = np.array([(h, r, -1) for h, r in keys], dtype=np.int64).reshape(-1, 3)
    scores, traces = score_queries(graph, params, horizons, queries, seed, batch_size, update_scope)
    by_key = {k: s for k, s in zip(keys, scores)}
    cases: dict[tuple[int, int], list[tuple[int, float, bool]]] = {k: [] for k in keys}
    for h, r, c, label in labeled.tolist():
        cases[(h, r)].append((c, float(by_key[(h, r)][c]), bool(label)))
    value, skipped = map_with_negatives(cases.values())
    metrics = {"MAP": value, "queries": len(keys) - skipped, "skipped": skipped}
    return EvalReport(metrics, [], attention_diagnostics(traces) if traces else None, traces, queries)


def format_metrics(metrics: dict[str, float], diagnostics: AttentionDiagnostics | None = None) -> str:
    """``metric<TAB>value`` lines; diagnostics add one line per step and statistic."""
    lines = []
    for k, v in metrics.items():
        lines.append(f"{k}\t{v}" if isinstance(v, (int, np.integer)) else f"{k}\t{v:.6f}")
    if diagnostics is not None:
        for name in ("entropy", "top1", "top3", "top5"):
            for t, v in enumerate(getattr(diagnostics, name)):
                lines.append(f"{name}@step{t}\t{v:.6f}")
    return "\n".join(lines) + "\n"


def write_metrics(metrics: dict[str, float], sink: IO[str], diagnostics: AttentionDiagnostics | None = None) -> None:
    sink.write(format_metrics(metrics, diagnostics))
