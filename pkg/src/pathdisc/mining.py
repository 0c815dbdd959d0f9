"""Negative pair mining: path substitution, partial reordering, random walks.

Every strategy keeps the instruction token sequence bit-identical and replaces
only what the path tower sees.

* PS swaps in a different admissible reference path from the same environment.
* PR shuffles the intermediate steps. The shuffle is stored as a
  ``percept_order`` permutation over the original (still graph-valid) node
  sequence; adjacency-preserving shuffles are preferred when they exist, and
  relaxed mode falls back to any non-identity shuffle of the percepts.
* RW draws a node-simple random walk with the same edge count that shares one
  endpoint with the original while the other endpoint lands at least
  ``far_threshold_m`` away (geodesic).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .common import MiningError, rng_for
from .envgraph import EnvironmentGraph
from .pairs import PROVENANCE_NEGATIVE, InstructionPathPair

STRATEGIES = ("PS", "PR", "RW")


@dataclass(frozen=True)
class MiningConfig:
    ps_per_positive: int = 1
    pr_per_positive: int = 1
    rw_per_positive: int = 1
    far_threshold_m: float = 5.0
    pr_strict: bool = False
    seed: int = 0
    budget: int = 400

    def validate(self) -> None:
        from .common import InputError

        for name in ("ps_per_positive", "pr_per_positive", "rw_per_positive"):
            if getattr(self, name) < 0:
                raise InputError(f"mining config: {name} must be >= 0")
        if not (self.far_threshold_m > 0):
            raise InputError(f"mining config: far_threshold_m must be > 0, got {self.far_threshold_m}")

    def count_for(self, strategy: str) -> int:
        return {"PS": self.ps_per_positive, "PR": self.pr_per_positive, "RW": self.rw_per_positive}[strategy]


def _negative(pair: InstructionPathPair, strategy: str, index: int, nodes=None, percept_order=None) -> InstructionPathPair:
    return InstructionPathPair(
        pair_id=f"{pair.pair_id}#{strategy.lower()}{index}",
        env_id=pair.env_id,
        nodes=pair.nodes if nodes is None else tuple(nodes),
        instruction=pair.instruction,
        provenance=PROVENANCE_NEGATIVE[strategy],
        split=pair.split,
        percept_order=percept_order,
    )


def source_pair_id(pair_id: str) -> str:
    """Positive pair a negative was mined from (ids are '<source>#<tag>')."""
    return pair_id.split("#", 1)[0]


def mine_ps(
    env: EnvironmentGraph, pair: InstructionPathPair, k: int, rng: np.random.Generator, budget: int = 400
) -> list[InstructionPathPair]:
    """Replace the path with k distinct other admissible paths from the same environment."""
    out: list[InstructionPathPair] = []
    used = {pair.nodes}
    for j in range(k):
        replacement = None
        for _ in range(budget):
            candidate = env.sample_reference_path(rng)
            if candidate.nodes not in used:
                replacement = candidate
                break
        if replacement is None:
            raise MiningError(
                f"PS: environment {env.env_id!r} too small to produce {k} distinct replacement paths "
                f"for {pair.pair_id!r}"
            )
        used.add(replacement.nodes)
        out.append(_negative(pair, "PS", j, nodes=replacement.nodes))
    return out


def _adjacency_preserving_shuffles(env: EnvironmentGraph, nodes: tuple[str, ...]) -> list[tuple[int, ...]]:
    """Non-identity intermediate permutations whose visit order stays edge-valid."""
    m = len(nodes)
    middle = list(range(1, m - 1))
    valid: list[tuple[int, ...]] = []
    for perm in permutations(middle):
        if list(perm) == middle:
            continue
        order = (0, *perm, m - 1)
        ok = True
        for a, b in zip(order, order[1:]):
            if nodes[b] not in env.neighbors(nodes[a]):
                ok = False
                break
        if ok:
            valid.append(order)
    return valid


def mine_pr(
    env: EnvironmentGraph,
    pair: InstructionPathPair,
    k: int,
    rng: np.random.Generator,
    strict: bool = False,
) -> list[InstructionPathPair]:
    """Shuffle intermediate steps, keeping the first and last nodes in place.

    The percept sequence is rebuilt from the shuffled visit order with
    recomputed orientation features (via percept_order). Strict mode requires
    an adjacency-preserving shuffle; relaxed mode falls back to shuffling the
    percept order alone.
    """
    m = len(pair.nodes)
    if m - 2 < 2:
        raise MiningError(
            f"PR: path of {pair.pair_id!r} has {m - 2} intermediate node(s); "
            "no non-identity shuffle exists"
        )
    identity = tuple(range(m))
    valid = _adjacency_preserving_shuffles(env, pair.nodes)
    if strict and not valid:
        raise MiningError(
            f"PR: no adjacency-preserving shuffle exists for {pair.pair_id!r} in strict mode"
        )
    out: list[InstructionPathPair] = []
    used: set[tuple[int, ...]] = set()
    for j in range(k):
        if valid:
            fresh = [v for v in valid if v not in used] or valid
            order = fresh[int(rng.integers(len(fresh)))]
        else:
            order = identity
            while order == identity:
                middle = rng.permutation(np.arange(1, m - 1))
                order = (0, *(int(i) for i in middle), m - 1)
        used.add(order)
        out.append(_negative(pair, "PR", j, percept_order=order))
    return out


def _random_simple_walk(
    env: EnvironmentGraph, start: str, edges: int, rng: np.random.Generator
) -> tuple[str, ...] | None:
    walk = [start]
    visited = {start}
    for _ in range(edges):
        options = [v for v in env.neighbors(walk[-1]) if v not in visited]
        if not options:
            return None
        nxt = options[int(rng.integers(len(options)))]
        walk.append(nxt)
        visited.add(nxt)
    return tuple(walk)


def mine_rw(
    env: EnvironmentGraph,
    pair: InstructionPathPair,
    k: int,
    rng: np.random.Generator,
    far_threshold_m: float = 5.0,
    budget: int = 400,
) -> list[InstructionPathPair]:
    """Same-edge-count random walks anchored at one endpoint, far at the other."""
    edges = len(pair.nodes) - 1
    start, end = pair.nodes[0], pair.nodes[-1]
    out: list[InstructionPathPair] = []
    used = {pair.nodes}
    for j in range(k):
        found = None
        for _ in range(budget):
            share_start = bool(rng.integers(2))
            anchor = start if share_start else end
            walk = _random_simple_walk(env, anchor, edges, rng)
            if walk is None:
                continue
            if not share_start:
                walk = walk[::-1]
            if walk in used:
                continue
            if share_start:
                far = env.geodesic(walk[-1], end) >= far_threshold_m
            else:
                far = env.geodesic(walk[0], start) >= far_threshold_m
            if far:
                found = walk
                break
        if found is None:
            raise MiningError(
                f"RW: could not satisfy the {far_threshold_m} m far constraint for {pair.pair_id!r} "
                f"within {budget} attempts"
            )
        used.add(found)
        out.append(_negative(pair, "RW", j, nodes=found))
    return out


def mine_negatives(
    envs: dict[str, EnvironmentGraph],
    positives,
    config: MiningConfig,
    strategies=STRATEGIES,
) -> list[InstructionPathPair]:
    """Mine all requested strategies for every positive, deterministically.

    Each positive gets its own derived rng stream, so the result does not
    depend on traversal or worker order.
    """
    config.validate()
    out: list[InstructionPathPair] = []
    for pair in sorted(positives, key=lambda p: p.pair_id):
        env = envs[pair.env_id]
        for strategy in strategies:
            count = config.count_for(strategy)
            if count == 0:
                continue
            rng = rng_for(config.seed, "mine", strategy, pair.pair_id)
            if strategy == "PS":
                out.extend(mine_ps(env, pair, count, rng, budget=config.budget))
            elif strategy == "PR":
                out.extend(mine_pr(env, pair, count, rng, strict=config.pr_strict))
            else:
                out.extend(mine_rw(env, pair, count, rng, config.far_threshold_m, budget=config.budget))
    return out
