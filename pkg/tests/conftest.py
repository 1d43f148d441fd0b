from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from kgflow.config import RunConfig, parse_config
from kgflow.graph import build_graph
from kgflow.model import init_params
from kgflow.synthetic import generate, write_task

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool | None, detail: str) -> None:
    """Print one status line per criterion; ``passed=None`` marks a skip."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"[{status}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def random_triples(rng: np.random.Generator, n: int, r: int, m: int) -> np.ndarray:
    return np.stack([rng.integers(0, n, m), rng.integers(0, r, m), rng.integers(0, n, m)], axis=1)


@pytest.fixture
def small_graph():
    rng = np.random.default_rng(3)
    triples = random_triples(rng, 20, 3, 45)
    return build_graph(triples, 20, 3), triples


@pytest.fixture
def small_params(small_graph):
    graph, _ = small_graph
    return init_params(20, graph.num_relations, 8, 4, seed=1)


@pytest.fixture(scope="session")
def synthetic_task():
    return generate()


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory, synthetic_task):
    d = tmp_path_factory.mktemp("synthetic")
    write_task(synthetic_task, d)
    (d / "toy.cfg").write_text("profile = toy\ntrain_path = train.txt\ntest_path = test.txt\n"
                               "log_timing = false\n", encoding="utf-8")
    return d


@dataclass
class TrainedRun:
    config: RunConfig
    out_dir: object
    metrics: dict
    cpu_seconds: float
    data: object


@pytest.fixture(scope="session")
def trained_toy(synthetic_dir, tmp_path_factory):
    """The toy profile trained once on the default synthetic task through the CLI code path."""
    from kgflow.cli import load_dataset, run_training

    config = parse_config((synthetic_dir / "toy.cfg").read_text(), str(synthetic_dir))
    data = load_dataset(config)
    out = tmp_path_factory.mktemp("run_a")
    t0 = time.process_time()
    metrics = run_training(config, data, str(out))
    return TrainedRun(config, out, metrics, time.process_time() - t0, data)
