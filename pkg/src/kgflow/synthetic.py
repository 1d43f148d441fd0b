"""Small knowledge graphs with a planted two-hop rule.

The default task plants ``q(x, z) <= r1(x, y) and r2(y, z)`` with ``r1`` and
``r2`` functional, so every composite triple has exactly one witness path.
A third relation and a sprinkle of random edges act as distractors.  The
random edges carry the distractor relation only: labelling them ``r1`` or
``r2`` would make some rule paths ambiguous and cap the attainable H@1
near 0.9 for any model.  Train holds all base edges plus a fraction of the
composite triples; test holds the rest, whose witness paths are therefore
always in train.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_entities: int = 200
    num_heads: int | None = None  # entities carrying the rule; all of them by default
    train_fraction: float = 0.8
    noise_rate: float = 0.1  # random edges, as a fraction of base edges
    seed: int = 0


@dataclass
class SyntheticTask:
    spec: SyntheticSpec
    entities: list[str]
    relations: list[str]  # r1, r2, r3, q
    train: np.ndarray  # (n, 3) ids
    test: np.ndarray
    witnesses: dict[tuple[int, int], int]  # (head, tail) of a composite triple -> middle node
    chance_mrr: float

    @property
    def composite(self) -> int:
        return self.relations.index("q")


def _name(i: int) -> str:
    return f"e{i:03d}"


def _derangement_chain(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Permutations ``p1``, ``p2`` with ``x``, ``p1[x]`` and ``p2[p1[x]]`` pairwise distinct."""
    for _ in range(1000):
        p1 = rng.permutation(n)
        p2 = rng.permutation(n)
        x = np.arange(n)
        y = p1
        z = p2[y]
        if np.all(x != y) and np.all(y != z) and np.all(x != z):
            return p1, p2
    raise InfeasibleSpecError("could not draw a rule without fixed points")  # pragma: no cover


def chance_mrr_zero_scorer(num_entities: int, test: np.ndarray, known: np.ndarray) -> float:
    """MRR of a scorer that gives every entity 0, by enumerating each filtered ranking.

    Both query directions are counted, matching the evaluation harness.
    """
    from .evaluation import RankingCase, filtered_rank

    answers: dict[tuple[int, int], set[int]] = {}
    for h, r, t in known.tolist():
        answers.setdefault((h, r), set()).add(t)
        answers.setdefault((t, -1 - r), set()).add(h)
    zero = np.zeros(num_entities)
    recips = []
    for h, r, t in test.tolist():
        for head, rel, tail in ((h, r, t), (t, -1 - r, h)):
            filt = answers[(head, rel)] - {tail}
            recips.append(1.0 / filtered_rank(RankingCase(head, rel, zero, tail, filt)))
    return float(np.mean(recips))


def generate(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticTask:
    n = spec.num_entities
    heads = n if spec.num_heads is None else spec.num_heads
    if n < 3:
        raise InfeasibleSpecError(f"a two-hop rule with distinct nodes needs at least 3 entities, got {n}")
    if not 0 < heads <= n:
        raise InfeasibleSpecError(f"rule needs {heads} head entities but only {n} exist")
    if not 0.0 < spec.train_fraction < 1.0:
        raise InfeasibleSpecError("train_fraction must lie strictly between 0 and 1")
    if spec.noise_rate < 0:
        raise InfeasibleSpecError("noise_rate must be non-negative")

    rng = np.random.default_rng(spec.seed)
    R1, R2, R3, Q = 0, 1, 2, 3
    p1, p2 = _derangement_chain(n, rng)
    xs = np.sort(rng.choice(n, size=heads, replace=False))
    base = [(x, R1, p1[x]) for x in range(n)] + [(y, R2, p2[y]) for y in range(n)]
    p3 = rng.permutation(n)
    base += [(x, R3, p3[x]) for x in range(n) if p3[x] != x]
    existing = {(h, t) for h, _, t in base}
    noise = []
    want = int(round(spec.noise_rate * len(base)))
    while len(noise) < want:
        h, t = (int(v) for v in rng.integers(0, n, 2))
        if h != t and (h, t) not in existing:
            existing.add((h, t))
            noise.append((h, R3, t))
    composite = [(int(x), Q, int(p2[p1[x]])) for x in xs]
    witnesses = {(int(x), int(p2[p1[x]])): int(p1[x]) for x in xs}

    perm = rng.permutation(len(composite))
    n_test = len(composite) - int(round(spec.train_fraction * len(composite)))
    test = np.array(sorted(composite[i] for i in perm[:n_test]), dtype=np.int64).reshape(-1, 3)
    train_comp = [composite[i] for i in perm[n_test:]]
    train = np.array(base + noise + train_comp, dtype=np.int64).reshape(-1, 3)
    train = train[rng.permutation(train.shape[0])]

    _check_answerable(n, train, test)
    known = np.concatenate([train, test])
    return SyntheticTask(spec, [_name(i) for i in range(n)], ["r1", "r2", "r3", "q"], train, test,
                         witnesses, chance_mrr_zero_scorer(n, test, known))


def _check_answerable(n: int, train: np.ndarray, test: np.ndarray, depth: int = 2) -> None:
    """Every test tail must be reachable from its head over train edges within ``depth`` hops."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for h, r, t in train.tolist():
        if r != 3:
            adj[h].append(t)
    for h, _, t in test.tolist():
        dist = {h: 0}
        queue = deque([h])
        while queue:
            v = queue.popleft()
            if dist[v] == depth:
                continue
            for u in adj[v]:
                if u not in dist:
                    dist[u] = dist[v] + 1
                    queue.append(u)
        if t not in dist:
            raise InfeasibleSpecError(f"test triple ({h}, q, {t}) has no supporting path in train")


def write_task(task: SyntheticTask, directory: str | os.PathLike) -> dict[str, str]:
    """Write train/test TSV files, the answer map and a metadata record."""
    os.makedirs(directory, exist_ok=True)
    ent, rel = task.entities, task.relations
    paths = {k: os.path.join(directory, f"{k}.txt") for k in ("train", "test", "answers")}

    def dump(path, rows):
        with open(path, "w", encoding="utf-8") as fh:
            for h, r, t in rows.tolist():
                fh.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")

    dump(paths["train"], task.train)
    dump(paths["test"], task.test)
    dump(paths["answers"], task.test)
    meta = {"spec": asdict(task.spec), "chance_mrr": task.chance_mrr, "num_train": int(task.train.shape[0]),
            "num_test": int(task.test.shape[0])}
    paths["meta"] = os.path.join(directory, "meta.json")
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def chain_task(length: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """A chain ``0 -next-> 1 -next-> ...`` with composite ``skip(i, i+2)`` triples.

    Returns ``(base_triples, skip_triples)``; relation ids are 0 (next) and 1 (skip).
    """
    if length < 3:
        raise InfeasibleSpecError("a chain needs at least 3 nodes")
    base = np.array([(i, 0, i + 1) for i in range(length - 1)], dtype=np.int64)
    skip = np.array([(i, 1, i + 2) for i in range(length - 2)], dtype=np.int64)
    return base, skip


def expected_test_size(num_heads: int, train_fraction: float) -> int:
    return num_heads - int(round(train_fraction * num_heads))


def enumerate_chance_rank(num_competitors: int) -> float:
    """Reciprocal mean-tie rank when the tail ties with ``num_competitors`` others."""
    return 1.0 / (1 + math.ceil(num_competitors / 2))
