"""Instruction-path pairs: vocabulary, token sequences, percepts and JSONL IO.

A pair couples a token sequence with a node path whose perceptual sequence is
derived on demand from the environment: per step, the node's base feature
concatenated with the 4-dim orientation feature [sin phi, cos phi, sin theta,
cos theta] of the heading toward the next visited node (zero heading on the
final step). Partial-reordering negatives carry an explicit ``percept_order``
permutation instead of an edited node list, so every stored node sequence
stays a valid path.

The ``latent_quality`` sidecar of augmented pairs is evaluation-only: the
default loader drops it, and only analysis code calls ``load_latent_quality``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .common import InputError, atomic_write_text, canonical_json, sha256_hex
from .envgraph import EnvironmentGraph

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

PROVENANCE_POSITIVE = "human_like"
PROVENANCE_AUGMENTED = "augmented"
PROVENANCE_NEGATIVE = {"PS": "negative:PS", "PR": "negative:PR", "RW": "negative:RW"}
ALL_PROVENANCES = (PROVENANCE_POSITIVE, PROVENANCE_AUGMENTED, *PROVENANCE_NEGATIVE.values())
SPLITS = ("train", "val_seen", "val_unseen")

DEFAULT_MAX_INSTRUCTION_LEN = 48
ORIENTATION_DIM = 4


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids PAD=0 UNK=1 BOS=2 EOS=3."""

    def __init__(self, tokens):
        tokens = tuple(tokens)
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise InputError(f"vocabulary must start with reserved tokens {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        extra = sorted(set(words) - set(RESERVED_TOKENS))
        return cls(RESERVED_TOKENS + tuple(extra))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode_words(self, words) -> tuple[int, ...]:
        """BOS/EOS-framed ids; unknown words map to UNK (loader-side contract)."""
        return (BOS, *(self.id(w) for w in words), EOS)

    def decode_to_words(self, ids) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids if i not in (PAD, BOS, EOS))

    @property
    def vocab_hash(self) -> str:
        return sha256_hex("\n".join(self.tokens))

    def to_json(self) -> str:
        return canonical_json({"tokens": list(self.tokens)})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        if not isinstance(doc, dict) or set(doc) != {"tokens"}:
            raise InputError("vocabulary file must be an object with a single 'tokens' field")
        return cls(doc["tokens"])

    def save(self, path: str) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class Instruction:
    token_ids: tuple[int, ...]
    surface: str

    @classmethod
    def from_words(cls, vocab: Vocabulary, words, max_len: int = DEFAULT_MAX_INSTRUCTION_LEN) -> "Instruction":
        ids = vocab.encode_words(words)
        if not (1 <= len(ids) <= max_len):
            raise InputError(f"instruction length {len(ids)} outside [1, {max_len}]")
        return cls(ids, " ".join(words))

    def words(self, vocab: Vocabulary) -> tuple[str, ...]:
        return vocab.decode_to_words(self.token_ids)


@dataclass(frozen=True)
class InstructionPathPair:
    pair_id: str
    env_id: str
    nodes: tuple[str, ...]
    instruction: Instruction
    provenance: str
    split: str
    percept_order: tuple[int, ...] | None = None

    def with_instruction(self, instruction: Instruction) -> "InstructionPathPair":
        return replace(self, instruction=instruction)


def heading_features(delta: np.ndarray) -> np.ndarray:
    dx, dy, dz = float(delta[0]), float(delta[1]), float(delta[2])
    phi = math.atan2(dy, dx)
    theta = math.atan2(dz, math.hypot(dx, dy))
    return np.array([math.sin(phi), math.cos(phi), math.sin(theta), math.cos(theta)])


_ZERO_HEADING = np.array([0.0, 1.0, 0.0, 1.0])


def build_percepts(env: EnvironmentGraph, nodes) -> np.ndarray:
    """Per-step view vectors for a visit order: base feature + heading to next."""
    nodes = tuple(nodes)
    m = len(nodes)
    out = np.empty((m, env.feature_dim + ORIENTATION_DIM))
    for i, nid in enumerate(nodes):
        if i + 1 < m:
            orient = heading_features(env.position(nodes[i + 1]) - env.position(nid))
        else:
            orient = _ZERO_HEADING
        out[i, : env.feature_dim] = env.feature(nid)
        out[i, env.feature_dim :] = orient
    return out


def percepts_for(pair: InstructionPathPair, env: EnvironmentGraph) -> np.ndarray:
    order = pair.percept_order
    if order is None:
        visit = pair.nodes
    else:
        visit = tuple(pair.nodes[i] for i in order)
    return build_percepts(env, visit)


def validate_pair(pair: InstructionPathPair, env: EnvironmentGraph) -> None:
    if pair.env_id != env.env_id:
        raise InputError(f"pair {pair.pair_id!r}: env {pair.env_id!r} does not match {env.env_id!r}")
    env.make_path(pair.nodes)
    if pair.provenance not in ALL_PROVENANCES:
        raise InputError(f"pair {pair.pair_id!r}: unknown provenance {pair.provenance!r}")
    if pair.split not in SPLITS:
        raise InputError(f"pair {pair.pair_id!r}: unknown split {pair.split!r}")
    if pair.percept_order is not None:
        m = len(pair.nodes)
        order = pair.percept_order
        if sorted(order) != list(range(m)):
            raise InputError(f"pair {pair.pair_id!r}: percept_order must be a permutation of 0..{m - 1}")
        if order[0] != 0 or order[-1] != m - 1:
            raise InputError(f"pair {pair.pair_id!r}: percept_order must fix the first and last steps")


_PAIR_FIELDS = {"pair_id", "env_id", "nodes", "tokens", "provenance", "split", "percept_order", "latent_quality"}


def pair_to_record(pair: InstructionPathPair, vocab: Vocabulary, latent_quality: float | None = None) -> dict:
    record = {
        "pair_id": pair.pair_id,
        "env_id": pair.env_id,
        "nodes": list(pair.nodes),
        "tokens": list(pair.instruction.words(vocab)),
        "provenance": pair.provenance,
        "split": pair.split,
    }
    if pair.percept_order is not None:
        record["percept_order"] = list(pair.percept_order)
    if latent_quality is not None:
        record["latent_quality"] = latent_quality
    return record


def save_pairs(path: str, pairs, vocab: Vocabulary, latent: dict[str, float] | None = None) -> None:
    lines = []
    for pair in pairs:
        lq = None if latent is None else latent.get(pair.pair_id)
        lines.append(canonical_json(pair_to_record(pair, vocab, lq)))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def _record_to_pair(record: dict, vocab: Vocabulary, max_len: int, where: str) -> InstructionPathPair:
    unknown = set(record) - _PAIR_FIELDS
    if unknown:
        raise InputError(f"{where}: unknown fields {sorted(unknown)}")
    for field in ("pair_id", "env_id", "nodes", "tokens", "provenance", "split"):
        if field not in record:
            raise InputError(f"{where}: missing field {field!r}")
    order = record.get("percept_order")
    return InstructionPathPair(
        pair_id=record["pair_id"],
        env_id=record["env_id"],
        nodes=tuple(record["nodes"]),
        instruction=Instruction.from_words(vocab, record["tokens"], max_len=max_len),
        provenance=record["provenance"],
        split=record["split"],
        percept_order=None if order is None else tuple(int(i) for i in order),
    )


def load_pairs(
    path: str,
    vocab: Vocabulary,
    envs: dict[str, EnvironmentGraph] | None = None,
    max_len: int = DEFAULT_MAX_INSTRUCTION_LEN,
) -> list[InstructionPathPair]:
    """Load pairs from JSONL, always dropping the latent_quality sidecar."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            pair = _record_to_pair(record, vocab, max_len, f"{path}:{lineno}")
            if envs is not None:
                env = envs.get(pair.env_id)
                if env is None:
                    raise InputError(f"{path}:{lineno}: unknown env_id {pair.env_id!r}")
                validate_pair(pair, env)
            pairs.append(pair)
    return pairs


def load_latent_quality(path: str) -> dict[str, float]:
    """Evaluation-only accessor for the latent quality sidecar field."""
    latent: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "latent_quality" in record:
                latent[record["pair_id"]] = float(record["latent_quality"])
    return latent


def load_environments(directory: str) -> dict[str, EnvironmentGraph]:
    from .envgraph import load_environment

    if not os.path.isdir(directory):
        raise InputError(f"environment directory {directory!r} does not exist")
    envs: dict[str, EnvironmentGraph] = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".json"):
            continue
        env = load_environment(os.path.join(directory, name))
        if env.env_id in envs:
            raise InputError(f"duplicate env_id {env.env_id!r} in {directory}")
        envs[env.env_id] = env
    if not envs:
        raise InputError(f"no environment files found in {directory}")
    return envs
