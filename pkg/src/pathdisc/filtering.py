"""Ranking an augmented pool by discriminator probability and carving subsets.

Ranks are 1-based, ordered by descending probability with pair-id tie breaks.
Subset sizes use ceil so tiny fractions still select at least one pair, and
the stratified random strategies draw from the top/bottom 40% of the ranking.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .common import InputError, atomic_write_text, canonical_json, rng_for
from .envgraph import EnvironmentGraph
from .pairs import InstructionPathPair, percepts_for

STRATUM_FRACTION = 0.4
SELECTION_STRATEGIES = ("top", "bottom", "random-full", "random-top", "random-bottom")


@dataclass(frozen=True)
class ScoredPair:
    pair_id: str
    probability: float
    rank: int


def rank_pool(disc, envs: dict[str, EnvironmentGraph], pool: list[InstructionPathPair]) -> list[ScoredPair]:
    """Score every pair and produce a deterministic total order (rank 1 = best)."""
    if not pool:
        raise InputError("rank_pool: empty pool")
    scored = []
    for pair in pool:
        outcome = disc.score_pair(pair.instruction.token_ids, percepts_for(pair, envs[pair.env_id]))
        scored.append((pair.pair_id, outcome.probability))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [ScoredPair(pair_id, probability, rank) for rank, (pair_id, probability) in enumerate(scored, start=1)]


def select(
    ranked: list[ScoredPair],
    strategy: str,
    fraction: float,
    seed: int = 0,
    stratum_fraction: float = STRATUM_FRACTION,
) -> list[ScoredPair]:
    """Carve a subset of size ceil(fraction * N) per the selection strategy."""
    if strategy not in SELECTION_STRATEGIES:
        raise InputError(f"unknown selection strategy {strategy!r}; expected one of {SELECTION_STRATEGIES}")
    if not (0.0 < fraction <= 1.0):
        raise InputError(f"fraction must be in (0, 1], got {fraction}")
    if not (0.0 < stratum_fraction <= 1.0):
        raise InputError(f"stratum fraction must be in (0, 1], got {stratum_fraction}")
    n = len(ranked)
    if n == 0:
        raise InputError("select: empty ranking")
    k = math.ceil(fraction * n)
    if strategy == "top":
        return list(ranked[:k])
    if strategy == "bottom":
        return list(ranked[n - k :])
    rng = rng_for(seed, "select", strategy, repr(fraction))
    if strategy == "random-full":
        stratum = list(ranked)
    elif strategy == "random-top":
        stratum = list(ranked[: math.ceil(stratum_fraction * n)])
    else:
        stratum = list(ranked[n - math.ceil(stratum_fraction * n) :])
    if k > len(stratum):
        raise InputError(
            f"{strategy}: requested {k} pairs but the {stratum_fraction:.0%} stratum holds only "
            f"{len(stratum)}; lower the fraction"
        )
    chosen = rng.choice(len(stratum), size=k, replace=False)
    picked = [stratum[int(i)] for i in chosen]
    picked.sort(key=lambda sp: sp.rank)
    return picked


def ranked_to_jsonl(ranked) -> str:
    lines = [
        canonical_json({"pair_id": sp.pair_id, "probability": sp.probability, "rank": sp.rank})
        for sp in ranked
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def save_ranked(path: str, ranked) -> None:
    atomic_write_text(path, ranked_to_jsonl(ranked))


def load_ranked(path: str) -> list[ScoredPair]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                out.append(ScoredPair(record["pair_id"], float(record["probability"]), int(record["rank"])))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad ranked record: {exc}") from exc
    if sorted(sp.rank for sp in out) != list(range(1, len(out) + 1)):
        raise InputError(f"{path}: ranks must be a permutation of 1..{len(out)}")
    return sorted(out, key=lambda sp: sp.rank)
