"""Batch loss, the training loop and checkpoints."""

from __future__ import annotations

import io
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .controller import BatchResult, Horizons, QueryResult, run_batch
from .graph import Graph, GraphView, mask_batch_edges
from .model import ModelParams, params_from_arrays
from .optim import OptimizerState, adam_step
from .uflow import UnconsciousStates, run_uflow

LOG_EPS = 1e-12
MASKING_MODES = ("standard", "cutoff")


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 1e-3
    grad_clipnorm: float | None = 1.0
    n_epochs: int = 1
    mode: str = "standard"
    horizons: Horizons = field(default_factory=Horizons)
    seed: int = 0
    epoch_fraction: float = 1.0
    update_scope: str = "visited"

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.n_epochs <= 0:
            raise ValueError("n_epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.mode not in MASKING_MODES:
            raise ValueError(f"mode must be one of {MASKING_MODES}")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise ValueError("epoch_fraction must lie in (0, 1]")


@dataclass
class BatchLoss:
    loss: T.Tensor  # scalar; differentiable when built from a BatchResult under a tape
    tail_mass: np.ndarray
    unvisited: int

    @property
    def value(self) -> float:
        return self.loss.item()


def loss_batch(results: BatchResult | list[QueryResult], tails) -> BatchLoss:
    """Mean of ``-log(a[tail] + eps)`` over the batch.

    A :class:`BatchResult` keeps the loss on the tape; a list of
    :class:`QueryResult` gives a plain value.
    """
    tails = np.asarray(tails, dtype=np.int64).reshape(-1)
    if isinstance(results, BatchResult):
        if len(results.traces) != tails.shape[0]:
            raise ValueError("results and tails are not aligned")
        mass = results.tail_mass(tails)
        loss = T.mean(-T.log(mass + LOG_EPS))
        values = mass.data.astype(np.float64)
    else:
        if len(results) != tails.shape[0]:
            raise ValueError("results and tails are not aligned")
        values = np.array([r.attention.get(int(t), 0.0) for r, t in zip(results, tails)], dtype=np.float64)
        loss = T.Tensor(np.array(np.mean(-np.log(values + LOG_EPS))), dtype=np.float64)
    return BatchLoss(loss, values, int(np.count_nonzero(values == 0.0)))


def training_queries(graph: Graph, train_triples: np.ndarray) -> np.ndarray:
    """Training triples plus their inverses when the graph carries inverse relations."""
    train = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    if not graph.has_inverse:
        return train
    inv = np.stack([train[:, 2], train[:, 1] + graph.num_raw_relations, train[:, 0]], axis=1)
    return np.concatenate([train, inv])


def query_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, position]))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 2**31])).permutation(n)


@dataclass
class BatchRecord:
    step: int
    loss: float
    unvisited_rate: float
    seconds: float
    grad_norm: float


@dataclass
class EpochMetrics:
    epoch: int
    records: list[BatchRecord] = field(default_factory=list)
    cursor: int = 0  # queries consumed in this epoch

    @property
    def mean_loss(self) -> float:
        return float(np.mean([r.loss for r in self.records])) if self.records else float("nan")

    @property
    def unvisited_rate(self) -> float:
        return float(np.mean([r.unvisited_rate for r in self.records])) if self.records else float("nan")


BatchHook = Callable[[np.ndarray, GraphView, UnconsciousStates, BatchResult], None]


def train_epoch(graph: Graph, train_triples: np.ndarray, params: ModelParams, config: TrainConfig,
                state: OptimizerState, epoch: int = 0, start: int = 0, stop: int | None = None,
                on_batch: BatchHook | None = None,
                log: Callable[[BatchRecord], None] | None = None) -> EpochMetrics:
    """One (possibly partial) pass over the shuffled training queries.

    ``start``/``stop`` are positions in the epoch's query order, so a run
    resumed from a mid-epoch checkpoint draws exactly the same batches and
    random streams as an uninterrupted one.  ``on_batch`` sees every batch's
    queries, masked view, U-Flow states and flow result (leakage checks
    use it).
    """
    queries = training_queries(graph, train_triples)
    order = epoch_order(config.seed, epoch, queries.shape[0])
    end = int(np.ceil(config.epoch_fraction * queries.shape[0]))
    if stop is not None:
        end = min(end, stop)
    h = config.horizons
    named = params.named()
    metrics = EpochMetrics(epoch, cursor=start)
    t0 = time.perf_counter()
    for lo in range(start, end, config.batch_size):
        hi = min(lo + config.batch_size, end)
        batch = queries[order[lo:hi]]
        view = mask_batch_edges(graph, batch, config.mode)
        rngs = [query_rng(config.seed, epoch, p) for p in range(lo, hi)]
        with T.Tape() as tape:
            ustates = run_uflow(view, params, h.n_steps_of_u_flow, h.max_sampled_edges_per_step,
                                np.random.default_rng(np.random.SeedSequence([config.seed, epoch, lo, 2**30])))
            result = run_batch(view, batch[:, 0], batch[:, 1], params, h, ustates, rngs,
                               tails=batch[:, 2], update_scope=config.update_scope)
            bl = loss_batch(result, batch[:, 2])
        if not np.isfinite(bl.value):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, queries {lo}:{hi}: {batch.tolist()}")
        if on_batch is not None:
            on_batch(batch, view, ustates, result)
        grads = T.backward(tape, bl.loss, named)
        norm = adam_step(named, grads, state)
        record = BatchRecord(len(metrics.records) + 1, bl.value, bl.unvisited / batch.shape[0],
                             time.perf_counter() - t0, norm)
        metrics.records.append(record)
        metrics.cursor = hi
        if log is not None:
            log(record)
    return metrics


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"KGFLOWCK"
_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: OptimizerState
    config: dict
    rng: dict  # {"seed", "epoch", "cursor"}


def checkpoint_save(params: ModelParams, state: OptimizerState, config: dict, rng_state: dict, sink) -> None:
    """Write a manifest followed by little-endian float32 arrays.

    Layout: magic, uint32 version, uint64 manifest length, UTF-8 JSON
    manifest, then each array's raw bytes in manifest order.
    """
    arrays: list[tuple[str, np.ndarray]] = [(k, v.data) for k, v in params.named().items()]
    for k in sorted(state.first_moment):
        arrays.append((f"adam.m/{k}", state.first_moment[k]))
        arrays.append((f"adam.v/{k}", state.second_moment[k]))
    manifest = {
        "version": _VERSION,
        "arrays": [{"name": k, "shape": list(a.shape), "dtype": "<f4"} for k, a in arrays],
        "optimizer": {"learning_rate": state.learning_rate, "clip_norm": state.clip_norm, "beta1": state.beta1,
                      "beta2": state.beta2, "eps": state.eps, "step": state.step},
        "config": config,
        "rng": rng_state,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IQ", _VERSION, len(header)))
    buf.write(header)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    payload = buf.getvalue()
    if isinstance(sink, (str, os.PathLike)):
        tmp = f"{os.fspath(sink)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, sink)
    else:
        sink.write(payload)


def checkpoint_load(source) -> Checkpoint:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    fixed = len(_MAGIC) + 12
    if len(data) < fixed or data[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", data[len(_MAGIC):fixed])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {_VERSION}")
    if len(data) < fixed + hlen:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(data[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    offset = fixed + hlen
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise CheckpointError(f"checkpoint truncated in array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last array")
    params = params_from_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    opt = manifest["optimizer"]
    state = OptimizerState(opt["learning_rate"], opt["clip_norm"], opt["beta1"], opt["beta2"], opt["eps"], opt["step"])
    for k, v in arrays.items():
        if k.startswith("adam.m/"):
            state.first_moment[k[len("adam.m/"):]] = v
        elif k.startswith("adam.v/"):
            state.second_moment[k[len("adam.v/"):]] = v
    return Checkpoint(params, state, manifest["config"], manifest["rng"])


def check_compatible(params: ModelParams, num_entities: int, num_relations: int, dim: int, att_dim: int) -> None:
    """Raise :class:`CheckpointError` when loaded parameters do not fit the data/config."""
    expected = {"entities": num_entities, "relations": num_relations, "n_dims": dim, "n_dims_att": att_dim}
    actual = {"entities": params.num_entities, "relations": params.num_relations, "n_dims": params.dim,
              "n_dims_att": params.att_dim}
    bad = [f"{k}: checkpoint {actual[k]}, expected {v}" for k, v in expected.items() if actual[k] != v]
    if bad:
        raise CheckpointError("checkpoint shape mismatch (" + "; ".join(bad) + ")")


def horizons_dict(h: Horizons) -> dict:
    return asdict(h)
