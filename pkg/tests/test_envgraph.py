import numpy as np
import pytest

from pathdisc.common import InputError
from pathdisc.envgraph import (
    EnvironmentGraph,
    NoAdmissiblePathError,
    environment_from_json,
    environment_to_json,
    load_environment,
    save_environment,
)


def make_env(env_id, positions, edges, feature_dim=2):
    nodes = {nid: (np.asarray(pos, dtype=float), np.zeros(feature_dim)) for nid, pos in positions.items()}
    return EnvironmentGraph(env_id, nodes, edges)


@pytest.fixture
def triangle():
    # 3-4-5 right triangle: direct hypotenuse edge beats the two-leg detour.
    return make_env(
        "tri",
        {"a": [0, 0, 0], "b": [3, 0, 0], "c": [3, 4, 0]},
        [("a", "b", None), ("b", "c", None), ("a", "c", None)],
    )


@pytest.fixture
def chain():
    return make_env(
        "chain",
        {"a": [0, 0, 0], "b": [1, 0, 0], "c": [2, 0, 0], "d": [3, 0, 0]},
        [("a", "b", 1.0), ("b", "c", 1.0), ("c", "d", 1.0)],
    )


class TestGeodesic:
    def test_identity(self, triangle):
        assert triangle.geodesic("a", "a") == 0.0

    def test_direct_edge_beats_detour(self, triangle):
        assert triangle.geodesic("a", "c") == pytest.approx(5.0)

    def test_chain_sum(self, chain):
        assert chain.geodesic("a", "d") == pytest.approx(3.0)

    def test_unknown_node(self, triangle):
        with pytest.raises(InputError):
            triangle.geodesic("a", "zz")

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            n = 8
            ids = [f"n{i:02d}" for i in range(n)]
            positions = {nid: rng.uniform(0, 10, size=3) for nid in ids}
            edges = [(ids[i], ids[i + 1], None) for i in range(n - 1)]
            extra = {(int(rng.integers(n)), int(rng.integers(n))) for _ in range(4)}
            for i, j in extra:
                if i != j and abs(i - j) > 1 and (ids[min(i, j)], ids[max(i, j)], None) not in edges:
                    edges.append((ids[min(i, j)], ids[max(i, j)], None))
            env = make_env("rand", positions, edges)
            for _ in range(20):
                a, b, c = (ids[int(rng.integers(n))] for _ in range(3))
                assert env.geodesic(a, b) == pytest.approx(env.geodesic(b, a))
                assert env.geodesic(a, c) <= env.geodesic(a, b) + env.geodesic(b, c) + 1e-9


class TestShortestPath:
    def test_degenerate_single_node(self, triangle):
        path = triangle.shortest_path("a", "a")
        assert path.nodes == ("a",)
        assert not triangle.is_reference_admissible(path)

    def test_triangle_takes_direct_edge(self, triangle):
        assert triangle.shortest_path("a", "c").nodes == ("a", "c")

    def test_lexicographic_tie_break(self):
        # Two equal-length routes s->m1->t and s->m2->t; m1 sorts first.
        env = make_env(
            "tie",
            {"s": [0, 0, 0], "m1": [1, 1, 0], "m2": [1, -1, 0], "t": [2, 0, 0]},
            [("s", "m1", 1.0), ("s", "m2", 1.0), ("m1", "t", 1.0), ("m2", "t", 1.0)],
        )
        assert env.shortest_path("s", "t").nodes == ("s", "m1", "t")

    def test_path_length_matches_geodesic(self, chain):
        rng = np.random.default_rng(1)
        ids = chain.node_ids
        for _ in range(10):
            a = ids[int(rng.integers(len(ids)))]
            b = ids[int(rng.integers(len(ids)))]
            p = chain.shortest_path(a, b)
            assert chain.path_length(p) == pytest.approx(chain.geodesic(a, b))


class TestPathOps:
    def test_single_node_path_length(self, chain):
        assert chain.path_length(chain.make_path(["b"])) == 0.0

    def test_three_equal_edges(self):
        env = make_env(
            "m",
            {"a": [0, 0, 0], "b": [1.5, 0, 0], "c": [3.0, 0, 0], "d": [4.5, 0, 0]},
            [("a", "b", None), ("b", "c", None), ("c", "d", None)],
        )
        assert env.path_length(env.make_path(["a", "b", "c", "d"])) == pytest.approx(4.5)

    def test_non_adjacent_step_rejected(self, chain):
        with pytest.raises(InputError):
            chain.make_path(["a", "c"])


class TestSampleReferencePath:
    @pytest.fixture
    def world(self):
        rng = np.random.default_rng(42)
        ids = [f"n{i:02d}" for i in range(14)]
        positions = {nid: rng.uniform(0, 14, size=3) * np.array([1, 1, 0.1]) for nid in ids}
        edges = [(ids[i], ids[max(0, i - 1 - int(rng.integers(3)))], None) for i in range(1, 14)]
        edges = [(a, b, None) for a, b, _ in edges if a != b]
        seen = set()
        unique = []
        for a, b, _ in edges:
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                unique.append((key[0], key[1], None))
        return make_env("w", positions, unique)

    def test_constraints_hold(self, world):
        for seed in range(15):
            path = world.sample_reference_path(seed)
            assert 4 <= path.edge_count <= 6
            assert world.path_length(path) >= 5.0

    def test_determinism(self, world):
        assert world.sample_reference_path(7).nodes == world.sample_reference_path(7).nodes

    def test_budget_exhausted(self, triangle):
        with pytest.raises(NoAdmissiblePathError):
            triangle.sample_reference_path(0, budget=50)


class TestSerialization:
    def test_round_trip(self, triangle, tmp_path):
        f = tmp_path / "tri.json"
        save_environment(triangle, str(f))
        loaded = load_environment(str(f))
        assert loaded.env_id == triangle.env_id
        assert loaded.node_ids == triangle.node_ids
        for nid in triangle.node_ids:
            assert np.array_equal(loaded.position(nid), triangle.position(nid))
            assert np.array_equal(loaded.feature(nid), triangle.feature(nid))
            assert loaded.neighbors(nid) == triangle.neighbors(nid)
        assert environment_to_json(loaded) == environment_to_json(triangle)

    def test_missing_edge_endpoint_named(self):
        doc = {
            "env_id": "x",
            "nodes": [
                {"id": "a", "pos": [0, 0, 0], "feature": [0.0]},
                {"id": "b", "pos": [1, 0, 0], "feature": [0.0]},
            ],
            "edges": [{"a": "a", "b": "ghost"}],
        }
        import json

        with pytest.raises(InputError) as exc:
            environment_from_json(json.dumps(doc))
        assert "ghost" in str(exc.value)

    def test_duplicate_node_id(self):
        import json

        doc = {
            "env_id": "x",
            "nodes": [
                {"id": "a", "pos": [0, 0, 0], "feature": [0.0]},
                {"id": "a", "pos": [1, 0, 0], "feature": [0.0]},
            ],
            "edges": [],
        }
        with pytest.raises(InputError) as exc:
            environment_from_json(json.dumps(doc))
        assert "duplicate" in str(exc.value)

    def test_unknown_field_rejected(self):
        import json

        doc = {
            "env_id": "x",
            "nodes": [
                {"id": "a", "pos": [0, 0, 0], "feature": [0.0]},
                {"id": "b", "pos": [1, 0, 0], "feature": [0.0]},
            ],
            "edges": [{"a": "a", "b": "b"}],
            "rooms": 3,
        }
        with pytest.raises(InputError) as exc:
            environment_from_json(json.dumps(doc))
        assert "rooms" in str(exc.value)

    def test_disconnected_rejected(self):
        with pytest.raises(InputError):
            make_env(
                "d",
                {"a": [0, 0, 0], "b": [1, 0, 0], "c": [5, 5, 5], "d": [6, 5, 5]},
                [("a", "b", None), ("c", "d", None)],
            )
