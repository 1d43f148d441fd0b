"""Query-independent message passing over the whole graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import EdgeSample, Graph, GraphView, sample_edges_global
from .model import ModelParams
from .nn import mlp2_forward
from .tensor import Tensor


@dataclass
class UnconsciousStates:
    states: Tensor  # (num_entities, D)
    steps: int = 0
    samples: list[EdgeSample] = field(default_factory=list)


def uflow_step(states: Tensor, params: ModelParams, sample: EdgeSample, graph: Graph) -> Tensor:
    """One residual message-passing step restricted to the sampled edges.

    Every node is updated; nodes without incoming messages aggregate zeros.
    """
    ids = np.asarray(sample.edge_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= graph.num_edges):
        raise IndexError("edge id outside graph")
    n = states.shape[0]
    src, rel, dst = graph.src[ids], graph.rel[ids], graph.dst[ids]
    msg_in = T.concat([T.gather(states, src), T.gather(params.relation_emb, rel), T.gather(states, dst)])
    messages = mlp2_forward(msg_in, params.uflow.message)
    agg = T.segment_sum_scaled(messages, dst, n)
    delta = mlp2_forward(T.concat([agg, states, params.entity_emb]), params.uflow.update)
    return states + delta


def run_uflow(view: GraphView, params: ModelParams, steps: int, sample_size: int,
              rng: np.random.Generator) -> UnconsciousStates:
    """Run ``steps`` U-Flow passes, redrawing the global edge sample each step.

    With ``steps == 0`` the states are the entity embeddings themselves.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    h = params.entity_emb
    samples = []
    for _ in range(steps):
        sample = sample_edges_global(view, sample_size, rng)
        samples.append(sample)
        h = uflow_step(h, params, sample, view.graph)
    return UnconsciousStates(h, steps, samples)
