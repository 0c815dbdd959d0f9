"""Deterministic synthetic worlds: graphs, grounded instructions, dataset splits.

Environments are jittered-grid graphs whose nodes carry a room/object category;
the node base feature is that category's one-hot prototype perturbed twice, once
per environment (so unseen environments render familiar categories differently)
and once per node. Instructions follow a clause grammar

    <leave|exit> the <category> then <verb> <direction> to the <category> ...
    then stop near the <category>

naming, in order, the categories and turn directions along the path. A quality
knob in [0, 1] progressively corrupts the per-edge middle clauses (category
substitution from a deliberately narrow pool, or clause dropping) while keeping
the first and last clauses intact, emulating machine-generated instructions
whose starts and ends read fine but whose middles are garbled.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .common import InputError, rng_for
from .envgraph import EnvironmentGraph, NoAdmissiblePathError, Path
from .pairs import (
    PROVENANCE_AUGMENTED,
    PROVENANCE_POSITIVE,
    Instruction,
    InstructionPathPair,
    Vocabulary,
)

CATEGORY_NAMES = (
    "kitchen", "bathroom", "bedroom", "hallway", "office", "garden", "library", "lounge",
    "stairs", "balcony", "closet", "pantry", "studio", "porch", "attic", "cellar",
    "workshop", "foyer", "gym", "terrace", "laundry", "nursery", "den", "atrium",
)

FIRST_VERBS = ("leave", "exit")
MOVE_VERBS = ("walk", "go", "head", "move")
DIRECTIONS = ("straight", "left", "right", "around")
CORRUPT_SUBSTITUTE_PROB = 0.7
CORRUPTION_POOL_SIZE = 4  # narrow category pool for corrupted clauses


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    train_envs: int = 20
    unseen_envs: int = 6
    nodes_per_env: int = 16
    categories: int = 16
    node_feature_noise: float = 0.08
    env_feature_noise: float = 0.45
    train_paths: int = 60
    val_seen_paths: int = 24
    val_unseen_paths: int = 36
    augmented_pairs: int = 2000
    instructions_per_path: int = 3
    max_instruction_len: int = 48

    def validate(self) -> None:
        counts = {
            "train_envs": self.train_envs,
            "unseen_envs": self.unseen_envs,
            "nodes_per_env": self.nodes_per_env,
            "categories": self.categories,
            "train_paths": self.train_paths,
            "val_seen_paths": self.val_seen_paths,
            "val_unseen_paths": self.val_unseen_paths,
            "augmented_pairs": self.augmented_pairs,
            "instructions_per_path": self.instructions_per_path,
        }
        for name, value in counts.items():
            if value < 1:
                raise InputError(f"world spec: {name} must be >= 1, got {value}")
        for name in ("node_feature_noise", "env_feature_noise"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise InputError(f"world spec: {name} must be in [0, 1], got {value}")
        if self.nodes_per_env < 5:
            raise InputError(
                f"world spec: nodes_per_env={self.nodes_per_env} is infeasible; "
                "a 4-edge simple path needs at least 5 nodes"
            )
        if self.categories > len(CATEGORY_NAMES):
            raise InputError(f"world spec: at most {len(CATEGORY_NAMES)} categories are supported")
        if self.max_instruction_len < 16:
            raise InputError("world spec: max_instruction_len must be at least 16")

    @property
    def feature_dim(self) -> int:
        return self.categories


def build_vocabulary(spec: WorldSpec) -> Vocabulary:
    words = set(FIRST_VERBS) | set(MOVE_VERBS) | set(DIRECTIONS)
    words |= set(CATEGORY_NAMES[: spec.categories])
    words |= {"the", "to", "then", "stop", "near"}
    return Vocabulary.from_words(sorted(words))


def _build_environment(spec: WorldSpec, env_id: str, rng: np.random.Generator) -> EnvironmentGraph:
    n = spec.nodes_per_env
    side = math.ceil(math.sqrt(n))
    cells = [(i, j) for i in range(side) for j in range(side)]
    order = rng.permutation(len(cells))[:n]
    # 3 m grid pitch with jitter keeps edges in the 1.5-4.5 m range.
    positions = []
    for k in order:
        ci, cj = cells[int(k)]
        positions.append(
            np.array(
                [
                    3.0 * ci + rng.uniform(-0.9, 0.9),
                    3.0 * cj + rng.uniform(-0.9, 0.9),
                    rng.uniform(-0.4, 0.4),
                ]
            )
        )
    ids = [f"n{i:02d}" for i in range(n)]
    # Spanning tree with spatial locality: node i attaches to its nearest
    # neighbor among the 6 preceding nodes, keeping edges room-scale while
    # leaving the diameter big enough for 4-6 edge paths.
    edges: list[tuple[str, str, None]] = []
    edge_set: set[tuple[str, str]] = set()
    for i in range(1, n):
        window = range(max(0, i - 6), i)
        j = min(window, key=lambda k: np.linalg.norm(positions[i] - positions[k]))
        key = (ids[j], ids[i])
        edges.append((key[0], key[1], None))
        edge_set.add(key)
    extra = max(2, n // 3)
    attempts = 0
    while extra > 0 and attempts < 80:
        attempts += 1
        i, j = int(rng.integers(n)), int(rng.integers(n))
        if i == j or np.linalg.norm(positions[i] - positions[j]) > 6.0:
            continue
        key = (ids[min(i, j)], ids[max(i, j)])
        if key in edge_set:
            continue
        edge_set.add(key)
        edges.append((key[0], key[1], None))
        extra -= 1
    categories = rng.integers(spec.categories, size=n)
    prototypes = np.eye(spec.categories) + spec.env_feature_noise * rng.normal(size=(spec.categories, spec.categories))
    nodes = {}
    for i, nid in enumerate(ids):
        feat = prototypes[int(categories[i])] + spec.node_feature_noise * rng.normal(size=spec.categories)
        nodes[nid] = (positions[i], feat)
    env = EnvironmentGraph(env_id, nodes, edges)
    env.node_category = {nid: int(categories[i]) for i, nid in enumerate(ids)}  # type: ignore[attr-defined]
    return env


def node_category_name(env: EnvironmentGraph, node_id: str) -> str:
    categories = getattr(env, "node_category", None)
    if categories is None:
        raise InputError(
            f"environment {env.env_id!r} carries no category metadata; "
            "instruction generation needs a freshly generated world"
        )
    return CATEGORY_NAMES[categories[node_id]]


def generate_world(spec: WorldSpec) -> dict[str, EnvironmentGraph]:
    """All environments (train + unseen) as a pure function of the spec."""
    spec.validate()
    env_ids = [f"train{i:02d}" for i in range(spec.train_envs)]
    env_ids += [f"unseen{i:02d}" for i in range(spec.unseen_envs)]
    envs: dict[str, EnvironmentGraph] = {}
    for env_id in env_ids:
        env = None
        for attempt in range(20):
            candidate = _build_environment(spec, env_id, rng_for(spec.seed, "env", env_id, attempt))
            try:
                candidate.sample_reference_path(rng_for(spec.seed, "feasibility", env_id, attempt), budget=200)
            except NoAdmissiblePathError:
                continue
            env = candidate
            break
        if env is None:
            raise InputError(f"world spec infeasible: could not realize admissible paths in {env_id}")
        envs[env_id] = env
    return envs


@dataclass(frozen=True)
class InstructionAudit:
    """Which middle clauses survived corruption (for evaluation and tests only)."""

    middle_total: int
    middle_faithful: int
    corrupted_positions: tuple[int, ...]
    dropped_positions: tuple[int, ...]


def _turn_word(env: EnvironmentGraph, prev: str, here: str, nxt: str | None) -> str:
    if nxt is None:
        return "straight"
    a = env.position(here) - env.position(prev)
    b = env.position(nxt) - env.position(here)
    cross = a[0] * b[1] - a[1] * b[0]
    dot = a[0] * b[0] + a[1] * b[1]
    angle = math.atan2(cross, dot)
    if abs(angle) <= math.pi / 6:
        return "straight"
    if abs(angle) >= 5 * math.pi / 6:
        return "around"
    return "left" if angle > 0 else "right"


def generate_instruction(
    env: EnvironmentGraph,
    path: Path,
    quality: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
    max_len: int = 48,
) -> tuple[Instruction, InstructionAudit]:
    """Template instruction for a path; quality < 1 corrupts middle clauses.

    The corruption plan (permutation, per-clause action, substitute category)
    is drawn before quality is consulted, so for a fixed rng stream a higher
    quality corrupts a subset of the clauses a lower quality corrupts.
    """
    if not (0.0 <= quality <= 1.0):
        raise InputError(f"quality must be in [0, 1], got {quality}")
    nodes = path.nodes
    edges = len(nodes) - 1
    if edges < 1:
        raise InputError("instruction generation needs a path with at least one edge")
    cat = lambda nid: node_category_name(env, nid)

    first_verb = FIRST_VERBS[int(rng.integers(len(FIRST_VERBS)))]
    verbs = [MOVE_VERBS[int(rng.integers(len(MOVE_VERBS)))] for _ in range(edges)]
    perm = [int(i) for i in rng.permutation(edges)]
    substitute = rng.random(edges) < CORRUPT_SUBSTITUTE_PROB
    pool = CATEGORY_NAMES[: min(CORRUPTION_POOL_SIZE, len(CATEGORY_NAMES))]
    pool_picks = [pool[int(rng.integers(len(pool)))] for _ in range(edges)]

    n_corrupt = int(math.floor((1.0 - quality) * edges + 0.5))
    corrupted = set(perm[:n_corrupt])

    clauses: list[list[str]] = [[first_verb, "the", cat(nodes[0])]]
    dropped: list[int] = []
    subbed: list[int] = []
    for step in range(edges):
        target = nodes[step + 1]
        direction = _turn_word(env, nodes[step - 1], nodes[step], target) if step > 0 else "straight"
        category = cat(target)
        if step in corrupted:
            if substitute[step]:
                wrong = pool_picks[step]
                if wrong == category:
                    wrong = pool[(pool.index(wrong) + 1) % len(pool)]
                subbed.append(step)
                clauses.append(["then", verbs[step], direction, "to", "the", wrong])
            else:
                dropped.append(step)
            continue
        clauses.append(["then", verbs[step], direction, "to", "the", category])
    clauses.append(["then", "stop", "near", "the", cat(nodes[-1])])

    words = [w for clause in clauses for w in clause]
    instruction = Instruction.from_words(vocab, words, max_len=max_len)
    audit = InstructionAudit(
        middle_total=edges,
        middle_faithful=edges - n_corrupt,
        corrupted_positions=tuple(sorted(subbed + dropped)),
        dropped_positions=tuple(sorted(dropped)),
    )
    return instruction, audit


@dataclass
class DatasetBundle:
    spec: WorldSpec
    envs: dict[str, EnvironmentGraph]
    vocab: Vocabulary
    pairs: list[InstructionPathPair] = field(default_factory=list)
    latent_quality: dict[str, float] = field(default_factory=dict)

    def split(self, name: str, provenance: str | None = None) -> list[InstructionPathPair]:
        out = [p for p in self.pairs if p.split == name]
        if provenance is not None:
            out = [p for p in out if p.provenance == provenance]
        return out

    @property
    def augmented(self) -> list[InstructionPathPair]:
        return [p for p in self.pairs if p.provenance == PROVENANCE_AUGMENTED]


def _sample_paths(
    spec: WorldSpec,
    envs: dict[str, EnvironmentGraph],
    env_ids: list[str],
    count: int,
    tag: str,
    taken: dict[str, set[tuple[str, ...]]],
    dedupe: bool,
) -> list[Path]:
    paths: list[Path] = []
    for idx in range(count):
        env_id = env_ids[idx % len(env_ids)]
        env = envs[env_id]
        chosen = None
        for attempt in range(50):
            path = env.sample_reference_path(rng_for(spec.seed, "path", tag, idx, attempt))
            if not dedupe or path.nodes not in taken.setdefault(env_id, set()):
                chosen = path
                break
        if chosen is None:
            # Tiny environments may not have 50 distinct admissible paths.
            chosen = env.sample_reference_path(rng_for(spec.seed, "path", tag, idx, 0))
        taken.setdefault(env_id, set()).add(chosen.nodes)
        paths.append(chosen)
    return paths


def generate_dataset(spec: WorldSpec) -> DatasetBundle:
    """Positives for train/val splits plus a mixed-quality augmented pool."""
    spec.validate()
    envs = generate_world(spec)
    vocab = build_vocabulary(spec)
    bundle = DatasetBundle(spec=spec, envs=envs, vocab=vocab)

    train_ids = sorted(e for e in envs if e.startswith("train"))
    unseen_ids = sorted(e for e in envs if e.startswith("unseen"))
    taken: dict[str, set[tuple[str, ...]]] = {}

    split_plan = (
        ("train", train_ids, spec.train_paths),
        ("val_seen", train_ids, spec.val_seen_paths),
        ("val_unseen", unseen_ids, spec.val_unseen_paths),
    )
    for split_name, pool_ids, n_paths in split_plan:
        paths = _sample_paths(spec, envs, pool_ids, n_paths, split_name, taken, dedupe=True)
        for p_idx, path in enumerate(paths):
            env = envs[path.env_id]
            for k in range(spec.instructions_per_path):
                rng = rng_for(spec.seed, "instr", split_name, p_idx, k)
                instruction, _ = generate_instruction(env, path, 1.0, rng, vocab, spec.max_instruction_len)
                bundle.pairs.append(
                    InstructionPathPair(
                        pair_id=f"{split_name}/{path.env_id}/p{p_idx:04d}/i{k}",
                        env_id=path.env_id,
                        nodes=path.nodes,
                        instruction=instruction,
                        provenance=PROVENANCE_POSITIVE,
                        split=split_name,
                    )
                )

    aug_paths = _sample_paths(spec, envs, train_ids, spec.augmented_pairs, "augmented", taken, dedupe=False)
    for a_idx, path in enumerate(aug_paths):
        env = envs[path.env_id]
        rng = rng_for(spec.seed, "augq", a_idx)
        quality = float(rng.uniform())
        instruction, _ = generate_instruction(
            env, path, quality, rng_for(spec.seed, "auginstr", a_idx), vocab, spec.max_instruction_len
        )
        pair_id = f"aug/{path.env_id}/p{a_idx:05d}"
        bundle.pairs.append(
            InstructionPathPair(
                pair_id=pair_id,
                env_id=path.env_id,
                nodes=path.nodes,
                instruction=instruction,
                provenance=PROVENANCE_AUGMENTED,
                split="train",
            )
        )
        bundle.latent_quality[pair_id] = quality
    return bundle


STATS_COLUMNS = ("provenance", "pairs", "unique_tokens", "total_tokens", "mean_len", "min_len", "max_len")


def dataset_stats(pairs, vocab: Vocabulary) -> list[dict]:
    """Token diversity and length distribution per provenance."""
    if not pairs:
        raise InputError("dataset_stats needs at least one pair")
    by_prov: dict[str, list[InstructionPathPair]] = {}
    for pair in pairs:
        by_prov.setdefault(pair.provenance, []).append(pair)
    rows = []
    for provenance in sorted(by_prov):
        group = by_prov[provenance]
        tokens: set[str] = set()
        lengths = []
        total = 0
        for pair in group:
            words = pair.instruction.words(vocab)
            tokens.update(words)
            lengths.append(len(pair.instruction.token_ids))
            total += len(words)
        rows.append(
            {
                "provenance": provenance,
                "pairs": len(group),
                "unique_tokens": len(tokens),
                "total_tokens": total,
                "mean_len": sum(lengths) / len(lengths),
                "min_len": min(lengths),
                "max_len": max(lengths),
            }
        )
    return rows


def stats_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=STATS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def stats_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for raw in reader:
        rows.append(
            {
                "provenance": raw["provenance"],
                "pairs": int(raw["pairs"]),
                "unique_tokens": int(raw["unique_tokens"]),
                "total_tokens": int(raw["total_tokens"]),
                "mean_len": float(raw["mean_len"]),
                "min_len": int(raw["min_len"]),
                "max_len": int(raw["max_len"]),
            }
        )
    return rows
