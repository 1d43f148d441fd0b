"""Command-line entry points: train, evaluate, extract, sweep, stats and generate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, RunConfig, config_dict, load_config, serialize
from .controller import complexity_report, run_query
from .evaluation import evaluate, evaluate_map, write_metrics
from .export import build_export
from .graph import Graph, GraphView, TripleFormatError, Vocab, build_graph, dataset_stats, load_triples
from .model import init_params
from .optim import OptimizerState
from .synthetic import InfeasibleSpecError, SyntheticSpec, generate, write_task
from .training import (CheckpointError, check_compatible, checkpoint_load, checkpoint_save, train_epoch,
                       training_queries)
from .uflow import run_uflow

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad input from the command line; exits with status 2."""


@dataclass
class Dataset:
    entities: Vocab
    relations: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    negatives: np.ndarray | None  # (n, 4) head, rel, candidate, label

    @property
    def known(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])


def _require_file(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"no {what} given")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def load_negatives(path: str, entities: Vocab, relations: Vocab) -> np.ndarray:
    """``head<TAB>rel<TAB>candidate<TAB>+/-`` lines."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in ("+", "-"):
                raise TripleFormatError(f"{path}:{lineno}: expected head, rel, candidate and +/-")
            h, r, c, lab = parts
            rows.append((entities.add(h), relations.add(r), entities.add(c), 1 if lab == "+" else 0))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)


def load_dataset(config: RunConfig) -> Dataset:
    ents, rels = Vocab(), Vocab()
    train, _, _ = load_triples(_require_file(config.train_path, "train_path"), ents, rels)
    splits = {}
    for key in ("valid_path", "test_path"):
        path = getattr(config, key)
        splits[key] = load_triples(_require_file(path, key), ents, rels)[0] if path else np.zeros((0, 3), np.int64)
    negatives = load_negatives(_require_file(config.negatives_path, "negatives_path"), ents, rels) \
        if config.negatives_path else None
    return Dataset(ents, rels, train, splits["valid_path"], splits["test_path"], negatives)


def dataset_graph(data: Dataset, config: RunConfig) -> Graph:
    return build_graph(data.train, len(data.entities), len(data.relations), config.add_inverse, config.add_self_loops)


def _lookup(vocab: Vocab, name: str, what: str) -> int:
    if name in vocab:
        return vocab[name]
    near = difflib.get_close_matches(name, vocab.names, n=5)
    hint = f"; did you mean: {', '.join(near)}" if near else ""
    raise UsageError(f"unknown {what} {name!r}{hint}")


# ----------------------------------------------------------------- train

def _checkpoint_points(fractions: list[float], n_epochs: int, n_queries: int) -> list[tuple[float, int, int]]:
    """``(fraction, epoch, cursor)`` for each checkpoint within the run, ordered."""
    points = set()
    for f in fractions:
        if f <= n_epochs:
            epoch = min(int(math.floor(f)), n_epochs - 1) if f > 0 else 0
            cursor = int(round((f - epoch) * n_queries))
            points.add((f, epoch, min(cursor, n_queries)))
    return sorted(points, key=lambda p: (p[1], p[2]))


def run_training(config: RunConfig, data: Dataset, out_dir: str, log_stream=None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    graph = dataset_graph(data, config)
    params = init_params(len(data.entities), graph.num_relations, config.n_dims, config.n_dims_att, seed=config.seed)
    state = OptimizerState(config.learning_rate, config.grad_clipnorm)
    tc = config.train_config()
    n_queries = training_queries(graph, data.train).shape[0]
    last = int(math.ceil(config.epoch_fraction * n_queries))
    points = _checkpoint_points(config.checkpoint_fractions, config.n_epochs, n_queries)
    step = 0
    loss_path = os.path.join(out_dir, "loss_log.csv")
    with open(loss_path, "w", encoding="utf-8", newline="") as log_fh:
        log_fh.write("step,loss,unvisited_rate,seconds\n")
        t0 = time.perf_counter()

        def log(record):
            nonlocal step
            step += 1
            seconds = time.perf_counter() - t0 if config.log_timing else 0.0
            log_fh.write(f"{step},{record.loss:.6f},{record.unvisited_rate:.6f},{seconds:.3f}\n")
            if log_stream is not None and step % 10 == 0:
                print(f"step {step} loss {record.loss:.4f}", file=log_stream)

        for epoch in range(config.n_epochs):
            cursor = 0
            stops = [p for p in points if p[1] == epoch] + [(None, epoch, last)]
            for frac, _, stop in stops:
                stop = min(stop, last)
                if stop > cursor:
                    metrics = train_epoch(graph, data.train, params, tc, state, epoch, start=cursor, stop=stop, log=log)
                    cursor = metrics.cursor
                if frac is not None:
                    checkpoint_save(params, state, config_dict(config), {"seed": config.seed, "epoch": epoch,
                                                                         "cursor": cursor},
                                    os.path.join(out_dir, f"checkpoint_{frac:g}.ckpt"))
    final = os.path.join(out_dir, "model.ckpt")
    checkpoint_save(params, state, config_dict(config),
                    {"seed": config.seed, "epoch": config.n_epochs, "cursor": 0}, final)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(serialize(config))
    report = _evaluate(config, data, graph, params, data.valid if data.valid.size else data.test)
    with open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="utf-8") as fh:
        write_metrics(report.metrics, fh, report.diagnostics)
    return report.metrics


def _evaluate(config: RunConfig, data: Dataset, graph: Graph, params, split: np.ndarray):
    if data.negatives is not None:
        return evaluate_map(graph, params, config.horizons, data.negatives, config.seed, config.eval_batch_size,
                            config.update_scope)
    return evaluate(graph, params, config.horizons, split, data.known, config.seed, config.eval_batch_size,
                    config.ties, config.update_scope)


def _load_model(config: RunConfig, data: Dataset, graph: Graph, path: str):
    ckpt = checkpoint_load(_require_file(path, "checkpoint"))
    check_compatible(ckpt.params, len(data.entities), graph.num_relations, config.n_dims, config.n_dims_att)
    return ckpt.params


def cmd_train(args) -> int:
    config = load_config(_require_file(args.config, "config"))
    out = args.output or config.output_dir
    metrics = run_training(config, load_dataset(config), out, sys.stderr)
    write_metrics(metrics, sys.stdout)
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(_require_file(args.config, "config"))
    data = load_dataset(config)
    graph = dataset_graph(data, config)
    params = _load_model(config, data, graph, args.checkpoint)
    split = data.valid if args.split == "valid" else data.test
    if args.limit:
        split = split[:args.limit]
    report = _evaluate(config, data, graph, params, split)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            write_metrics(report.metrics, fh, report.diagnostics)
    write_metrics(report.metrics, sys.stdout, report.diagnostics)
    return 0


def extract_query(config: RunConfig, data: Dataset, graph: Graph, params, head: int, rel: int,
                  tail: int | None = None):
    view = GraphView.full(graph)
    h = config.horizons
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    ustates = run_uflow(view, params, h.n_steps_of_u_flow, h.max_sampled_edges_per_step, rng)
    result = run_query(view, head, rel, params, h, ustates, np.random.default_rng(np.random.SeedSequence(
        [config.seed, 8])), tail=tail, update_scope=config.update_scope)
    full = build_export(result.trace, graph, data.entities.names, data.relations.names)
    pruned = build_export(result.trace, graph, data.entities.names, data.relations.names, config.prune_threshold)
    return result, full, pruned


def cmd_extract(args) -> int:
    config = load_config(_require_file(args.config, "config"))
    data = load_dataset(config)
    graph = dataset_graph(data, config)
    params = _load_model(config, data, graph, args.checkpoint)
    head = _lookup(data.entities, args.head, "entity")
    rel = _lookup(data.relations, args.relation, "relation")
    tail = _lookup(data.entities, args.tail, "entity") if args.tail else None
    _, full, pruned = extract_query(config, data, graph, params, head, rel, tail)
    os.makedirs(args.output, exist_ok=True)
    for name, export in (("full", full), ("pruned", pruned)):
        with open(os.path.join(args.output, f"{name}.dot"), "w", encoding="utf-8") as fh:
            fh.write(export.to_dot(name))
        with open(os.path.join(args.output, f"{name}.json"), "w", encoding="utf-8") as fh:
            fh.write(export.to_json())
    print(f"full: {len(full.nodes)} nodes, {len(full.edges)} edges; "
          f"pruned: {len(pruned.nodes)} nodes, {len(pruned.edges)} edges")
    return 0


# ----------------------------------------------------------------- sweep

SWEEP_AXES = {
    "N_e": "max_sampled_edges_per_node",
    "N_s": "max_seen_nodes_per_step",
    "N_a": "max_attended_nodes_per_step",
    "T_c": "n_steps_of_c_flow",
    "batch_size": "batch_size",
}
SWEEP_COLUMNS = ["axis", "value", "H@1", "H@3", "H@10", "MRR", "train_seconds", "edges_scored", "messages",
                 "visited"]


def sweep(config: RunConfig, data: Dataset, axis: str, values: list[int], train_queries: int,
          valid_queries: int) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    graph = dataset_graph(data, config)
    n = training_queries(graph, data.train).shape[0]
    valid = (data.valid if data.valid.size else data.test)[:valid_queries]
    rows = []
    for value in values:
        cfg = dataclasses.replace(config, **{SWEEP_AXES[axis]: int(value)})
        if axis == "N_s" and cfg.max_attended_nodes_per_step > cfg.max_seen_nodes_per_step:
            cfg = dataclasses.replace(cfg, max_attended_nodes_per_step=cfg.max_seen_nodes_per_step)
        if axis == "N_a" and cfg.max_attended_nodes_per_step > cfg.max_seen_nodes_per_step:
            cfg = dataclasses.replace(cfg, max_seen_nodes_per_step=cfg.max_attended_nodes_per_step)
        cfg.validate(check_paths=False)
        params = init_params(len(data.entities), graph.num_relations, cfg.n_dims, cfg.n_dims_att, seed=cfg.seed)
        state = OptimizerState(cfg.learning_rate, cfg.grad_clipnorm)
        t0 = time.perf_counter()
        train_epoch(graph, data.train, params, cfg.train_config(), state, 0, stop=min(train_queries, n))
        seconds = time.perf_counter() - t0
        report = evaluate(graph, params, cfg.horizons, valid, data.known, cfg.seed, cfg.eval_batch_size, cfg.ties,
                          cfg.update_scope)
        steps = [s for tr in report.traces for s in tr.steps]
        rows.append({
            "axis": axis, "value": int(value),
            **{k: report.metrics[k] for k in ("H@1", "H@3", "H@10", "MRR")},
            "train_seconds": seconds,
            "edges_scored": float(np.mean([s.edges_scored for s in steps])),
            "messages": float(np.mean([s.messages for s in steps])),
            "visited": float(np.mean([len(tr.visited) for tr in report.traces])),
        })
        for tr in report.traces:
            bad = [c for c in complexity_report(tr, cfg.horizons) if not c.passed]
            if bad:
                raise RuntimeError(f"complexity bound violated: {bad[0]}")
    return rows


def write_sweep_csv(rows: list[dict], sink) -> None:
    writer = csv.DictWriter(sink, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def cmd_sweep(args) -> int:
    config = load_config(_require_file(args.config, "config"))
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"sweep values must be integers: {args.values!r}") from None
    rows = sweep(config, load_dataset(config), args.axis, values, args.train_queries, args.valid_queries)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            write_sweep_csv(rows, fh)
    write_sweep_csv(rows, sys.stdout)
    return 0


# ----------------------------------------------------------------- stats / generate

def cmd_stats(args) -> int:
    paths = [_require_file(p, name) for p, name in ((args.train, "train file"), (args.valid, "valid file"),
                                                    (args.test, "test file"))]
    ents, rels = Vocab(), Vocab()
    train, valid, test = (load_triples(p, ents, rels)[0] for p in paths)
    graph = build_graph(train, len(ents), len(rels), add_inverse=True, add_self_loops=False)
    stats = dataset_stats(graph, test)
    out = {
        "entities": len(ents), "relations": len(rels), "train": int(train.shape[0]),
        "valid": int(valid.shape[0]), "test": int(test.shape[0]),
        "PME_test": 100.0 * stats.multi_edge_fraction, "AvgD_test": stats.mean_shortest_path,
        "unreachable_test": stats.unreachable,
    }
    write_metrics(out, sys.stdout)
    return 0


def cmd_generate(args) -> int:
    spec = SyntheticSpec(args.entities, None, args.train_fraction, args.noise, args.seed)
    task = generate(spec)
    paths = write_task(task, args.output)
    print(f"wrote {paths['train']} ({task.train.shape[0]} triples), {paths['test']} ({task.test.shape[0]} triples); "
          f"chance MRR {task.chance_mrr:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgflow", description="Attention-flow knowledge graph reasoning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints, a loss log and validation metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="output directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="filtered ranking metrics, or MAP when negatives are configured")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N triples")
    p.add_argument("--output", help="also write the metrics report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="export the attended subgraph of one query as DOT and JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--tail")
    p.add_argument("--output", required=True, help="directory for full/pruned .dot and .json files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("sweep", help="vary one horizon and record metrics, time and cost counters")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--train-queries", type=int, default=200)
    p.add_argument("--valid-queries", type=int, default=50)
    p.add_argument("--output", help="CSV file")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="split sizes, multi-edge share and mean shortest path of test triples")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("generate", help="write a synthetic two-hop-rule dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TripleFormatError, InfeasibleSpecError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
