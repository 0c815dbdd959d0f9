"""Navigation environments as weighted undirected graphs.

Geodesic queries use Dijkstra; equal-length shortest paths break ties toward
the lexicographically smallest node-id sequence so datasets are reproducible.
Reference paths follow the room-to-room construction rules: at least 5 m long
and between 4 and 6 edges.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

import numpy as np

from .common import InputError, atomic_write_text, canonical_json

MIN_REFERENCE_LENGTH_M = 5.0
MIN_REFERENCE_EDGES = 4
MAX_REFERENCE_EDGES = 6


class NoAdmissiblePathError(InputError):
    """Rejection sampling exhausted its budget without an admissible path."""


@dataclass(frozen=True)
class Path:
    """A node sequence inside one environment; adjacency is validated at creation."""

    env_id: str
    nodes: tuple[str, ...]

    @property
    def edge_count(self) -> int:
        return len(self.nodes) - 1


class EnvironmentGraph:
    """Immutable connected graph of located nodes with perceptual base features."""

    def __init__(self, env_id: str, nodes: dict[str, tuple[np.ndarray, np.ndarray]], edges):
        if not env_id:
            raise InputError("environment needs a non-empty env_id")
        if len(nodes) < 2:
            raise InputError(f"environment {env_id!r} needs at least 2 nodes")
        self.env_id = env_id
        self._pos: dict[str, np.ndarray] = {}
        self._feat: dict[str, np.ndarray] = {}
        dim = None
        for node_id, (pos, feat) in nodes.items():
            pos = np.asarray(pos, dtype=np.float64)
            feat = np.asarray(feat, dtype=np.float64)
            if pos.shape != (3,):
                raise InputError(f"node {node_id!r}: position must be a 3-vector, got shape {pos.shape}")
            if feat.ndim != 1 or feat.size == 0:
                raise InputError(f"node {node_id!r}: feature must be a non-empty vector")
            if dim is None:
                dim = feat.size
            elif feat.size != dim:
                raise InputError(f"node {node_id!r}: feature dim {feat.size} differs from {dim}")
            self._pos[node_id] = pos
            self._feat[node_id] = feat
        self._adj: dict[str, dict[str, float]] = {nid: {} for nid in self._pos}
        for entry in edges:
            a, b = entry[0], entry[1]
            length = entry[2] if len(entry) > 2 and entry[2] is not None else None
            for endpoint in (a, b):
                if endpoint not in self._pos:
                    raise InputError(f"edge ({a!r}, {b!r}) references unknown node id {endpoint!r}")
            if a == b:
                raise InputError(f"self-loop on node {a!r} is not allowed")
            if b in self._adj[a]:
                raise InputError(f"duplicate edge ({a!r}, {b!r})")
            if length is None:
                length = float(np.linalg.norm(self._pos[a] - self._pos[b]))
            length = float(length)
            if not (length > 0.0) or not np.isfinite(length):
                raise InputError(f"edge ({a!r}, {b!r}) must have positive finite length, got {length}")
            self._adj[a][b] = length
            self._adj[b][a] = length
        self._node_ids = tuple(sorted(self._pos))
        self._neighbors = {nid: tuple(sorted(self._adj[nid])) for nid in self._node_ids}
        self._dist_cache: dict[str, dict[str, float]] = {}
        self._check_connected()

    def _check_connected(self) -> None:
        start = self._node_ids[0]
        seen = {start}
        frontier = [start]
        while frontier:
            u = frontier.pop()
            for v in self._adj[u]:
                if v not in seen:
                    seen.add(v)
                    frontier.append(v)
        if len(seen) != len(self._node_ids):
            missing = sorted(set(self._node_ids) - seen)
            raise InputError(f"environment {self.env_id!r} is disconnected; unreached nodes: {missing[:5]}")

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self._node_ids

    @property
    def feature_dim(self) -> int:
        return next(iter(self._feat.values())).size

    def has_node(self, node_id: str) -> bool:
        return node_id in self._pos

    def position(self, node_id: str) -> np.ndarray:
        return self._pos[node_id]

    def feature(self, node_id: str) -> np.ndarray:
        return self._feat[node_id]

    def neighbors(self, node_id: str) -> tuple[str, ...]:
        self._require(node_id)
        return self._neighbors[node_id]

    def edge_length(self, a: str, b: str) -> float:
        self._require(a)
        if b not in self._adj[a]:
            raise InputError(f"no edge between {a!r} and {b!r} in {self.env_id!r}")
        return self._adj[a][b]

    def _require(self, node_id: str) -> None:
        if node_id not in self._pos:
            raise InputError(f"unknown node id {node_id!r} in environment {self.env_id!r}")

    def _dists_from(self, source: str) -> dict[str, float]:
        cached = self._dist_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0.0}
        heap = [(0.0, source)]
        settled: set[str] = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in settled:
                continue
            settled.add(u)
            for v, w in self._adj[u].items():
                nd = d + w
                if v not in dist or nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist_cache[source] = dist
        return dist

    def geodesic(self, a: str, b: str) -> float:
        self._require(a)
        self._require(b)
        return self._dists_from(a)[b]

    def shortest_path(self, a: str, b: str) -> Path:
        """Shortest path from a to b; ties resolve to the smallest node-id sequence.

        Walks greedily from a, always choosing the smallest-id neighbor that
        still lies on some shortest path toward b. Optimal-substructure makes
        the greedy sequence the lexicographic minimum over all shortest paths.
        """
        self._require(a)
        self._require(b)
        dist_to_b = self._dists_from(b)
        sequence = [a]
        current = a
        while current != b:
            best = None
            for v in self._neighbors[current]:
                if self._adj[current][v] + dist_to_b[v] == dist_to_b[current]:
                    best = v
                    break
            if best is None:
                # Float summation drift between the two Dijkstra sweeps; fall
                # back to the most relaxed neighbor (still a shortest path).
                best = min(self._neighbors[current], key=lambda v: (self._adj[current][v] + dist_to_b[v], v))
            sequence.append(best)
            current = best
        return Path(self.env_id, tuple(sequence))

    def make_path(self, nodes) -> Path:
        nodes = tuple(nodes)
        if not nodes:
            raise InputError("a path needs at least one node")
        for nid in nodes:
            self._require(nid)
        for u, v in zip(nodes, nodes[1:]):
            if v not in self._adj[u]:
                raise InputError(f"path step {u!r} -> {v!r} is not an edge in {self.env_id!r}")
        return Path(self.env_id, nodes)

    def path_length(self, path: Path) -> float:
        if path.env_id != self.env_id:
            raise InputError(f"path belongs to {path.env_id!r}, not {self.env_id!r}")
        total = 0.0
        for u, v in zip(path.nodes, path.nodes[1:]):
            total += self.edge_length(u, v)
        return total

    def is_reference_admissible(self, path: Path) -> bool:
        edges = path.edge_count
        return (
            MIN_REFERENCE_EDGES <= edges <= MAX_REFERENCE_EDGES
            and self.path_length(path) >= MIN_REFERENCE_LENGTH_M
        )

    def sample_reference_path(self, rng_seed, budget: int = 1000) -> Path:
        """Sample start/end nodes and keep the shortest path once admissible."""
        rng = _as_rng(rng_seed)
        n = len(self._node_ids)
        for _ in range(budget):
            i = int(rng.integers(n))
            j = int(rng.integers(n))
            if i == j:
                continue
            path = self.shortest_path(self._node_ids[i], self._node_ids[j])
            if self.is_reference_admissible(path):
                return path
        raise NoAdmissiblePathError(
            f"no admissible path found in {self.env_id!r} after {budget} attempts"
        )


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng_seed))))


_ENV_FIELDS = {"env_id", "nodes", "edges"}
_NODE_FIELDS = {"id", "pos", "feature"}
_EDGE_FIELDS = {"a", "b", "length"}


def environment_to_json(env: EnvironmentGraph) -> str:
    nodes = [
        {"id": nid, "pos": list(env.position(nid)), "feature": list(env.feature(nid))}
        for nid in env.node_ids
    ]
    edges = []
    emitted = set()
    for a in env.node_ids:
        for b in env.neighbors(a):
            key = (min(a, b), max(a, b))
            if key in emitted:
                continue
            emitted.add(key)
            edges.append({"a": key[0], "b": key[1], "length": env.edge_length(a, b)})
    edges.sort(key=lambda e: (e["a"], e["b"]))
    return canonical_json({"env_id": env.env_id, "nodes": nodes, "edges": edges})


def save_environment(env: EnvironmentGraph, path: str) -> None:
    atomic_write_text(path, environment_to_json(env) + "\n")


def environment_from_json(text: str) -> EnvironmentGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"environment file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("environment file must contain a JSON object")
    unknown = set(doc) - _ENV_FIELDS
    if unknown:
        raise InputError(f"environment file: unknown fields {sorted(unknown)}")
    for field in _ENV_FIELDS:
        if field not in doc:
            raise InputError(f"environment file: missing field {field!r}")
    nodes: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for idx, node in enumerate(doc["nodes"]):
        if not isinstance(node, dict):
            raise InputError(f"nodes[{idx}]: expected an object")
        unknown = set(node) - _NODE_FIELDS
        if unknown:
            raise InputError(f"nodes[{idx}]: unknown fields {sorted(unknown)}")
        for field in _NODE_FIELDS:
            if field not in node:
                raise InputError(f"nodes[{idx}]: missing field {field!r}")
        nid = node["id"]
        if not isinstance(nid, str):
            raise InputError(f"nodes[{idx}]: id must be a string")
        if nid in nodes:
            raise InputError(f"nodes[{idx}]: duplicate node id {nid!r}")
        nodes[nid] = (np.asarray(node["pos"], dtype=np.float64), np.asarray(node["feature"], dtype=np.float64))
    edges = []
    for idx, edge in enumerate(doc["edges"]):
        if not isinstance(edge, dict):
            raise InputError(f"edges[{idx}]: expected an object")
        unknown = set(edge) - _EDGE_FIELDS
        if unknown:
            raise InputError(f"edges[{idx}]: unknown fields {sorted(unknown)}")
        for field in ("a", "b"):
            if field not in edge:
                raise InputError(f"edges[{idx}]: missing field {field!r}")
        edges.append((edge["a"], edge["b"], edge.get("length")))
    return EnvironmentGraph(doc["env_id"], nodes, edges)


def load_environment(path: str) -> EnvironmentGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return environment_from_json(fh.read())
