import numpy as np
import pytest

from pathdisc.common import MiningError, rng_for
from pathdisc.envgraph import EnvironmentGraph
from pathdisc.mining import MiningConfig, mine_negatives, mine_pr, mine_ps, mine_rw, source_pair_id
from pathdisc.pairs import (
    Instruction,
    InstructionPathPair,
    Vocabulary,
    load_pairs,
    percepts_for,
    save_pairs,
)
from pathdisc.world import WorldSpec, generate_dataset

SPEC = WorldSpec(
    seed=3,
    train_envs=3,
    unseen_envs=1,
    nodes_per_env=14,
    categories=8,
    train_paths=6,
    val_seen_paths=2,
    val_unseen_paths=2,
    augmented_pairs=4,
)


@pytest.fixture(scope="module")
def bundle():
    return generate_dataset(SPEC)


@pytest.fixture(scope="module")
def positive(bundle):
    return bundle.split("train", "human_like")[0]


@pytest.fixture(scope="module")
def env_of(bundle):
    return lambda pair: bundle.envs[pair.env_id]


class TestPS:
    def test_replacement_differs_and_is_admissible(self, bundle, positive, env_of):
        env = env_of(positive)
        negs = mine_ps(env, positive, 3, rng_for(0))
        for neg in negs:
            assert neg.nodes != positive.nodes
            path = env.make_path(neg.nodes)
            assert 4 <= path.edge_count <= 6
            assert env.path_length(path) >= 5.0
            assert neg.instruction.token_ids == positive.instruction.token_ids

    def test_deterministic(self, positive, env_of):
        env = env_of(positive)
        a = mine_ps(env, positive, 2, rng_for(7))
        b = mine_ps(env, positive, 2, rng_for(7))
        assert [n.nodes for n in a] == [n.nodes for n in b]

    def test_too_small_environment(self, positive):
        nodes = {f"n{i}": (np.array([float(i), 0, 0]), np.zeros(2)) for i in range(7)}
        edges = [(f"n{i}", f"n{i + 1}", 1.5) for i in range(6)]
        line = EnvironmentGraph("line", nodes, edges)
        pair = InstructionPathPair(
            pair_id="x",
            env_id="line",
            nodes=tuple(f"n{i}" for i in range(5)),
            instruction=positive.instruction,
            provenance="human_like",
            split="train",
        )
        # A 7-node line admits very few admissible paths; asking for many
        # distinct replacements must exhaust the budget.
        with pytest.raises(MiningError):
            mine_ps(line, pair, 30, rng_for(1), budget=50)


class TestPR:
    def test_endpoints_fixed_and_not_identity(self, bundle, positive, env_of):
        negs = mine_pr(env_of(positive), positive, 3, rng_for(2))
        m = len(positive.nodes)
        for neg in negs:
            order = neg.percept_order
            assert order is not None
            assert order[0] == 0 and order[-1] == m - 1
            assert order != tuple(range(m))
            assert sorted(order) == list(range(m))
            assert neg.nodes == positive.nodes
            assert neg.instruction.token_ids == positive.instruction.token_ids

    def test_percepts_are_reordered(self, bundle, positive, env_of):
        env = env_of(positive)
        neg = mine_pr(env, positive, 1, rng_for(3))[0]
        pos_percepts = percepts_for(positive, env)
        neg_percepts = percepts_for(neg, env)
        assert pos_percepts.shape == neg_percepts.shape
        assert not np.array_equal(pos_percepts, neg_percepts)
        # Base features follow the shuffled visit order; orientations are rebuilt.
        d = env.feature_dim
        for i, src in enumerate(neg.percept_order):
            assert np.array_equal(neg_percepts[i, :d], env.feature(positive.nodes[src]))

    def test_single_intermediate_errors(self, positive):
        nodes = {f"n{i}": (np.array([float(i), 0, 0]), np.zeros(2)) for i in range(3)}
        edges = [("n0", "n1", 1.0), ("n1", "n2", 1.0)]
        env = EnvironmentGraph("tiny", nodes, edges)
        pair = InstructionPathPair(
            pair_id="y", env_id="tiny", nodes=("n0", "n1", "n2"),
            instruction=positive.instruction, provenance="human_like", split="train",
        )
        with pytest.raises(MiningError):
            mine_pr(env, pair, 1, rng_for(0), strict=True)
        with pytest.raises(MiningError):
            mine_pr(env, pair, 1, rng_for(0), strict=False)

    def test_strict_mode_on_chain(self, positive):
        # On a pure chain no adjacency-preserving shuffle exists.
        nodes = {f"n{i}": (np.array([float(i), 0, 0]), np.zeros(2)) for i in range(5)}
        edges = [(f"n{i}", f"n{i + 1}", 1.0) for i in range(4)]
        env = EnvironmentGraph("chain", nodes, edges)
        pair = InstructionPathPair(
            pair_id="z", env_id="chain", nodes=tuple(f"n{i}" for i in range(5)),
            instruction=positive.instruction, provenance="human_like", split="train",
        )
        with pytest.raises(MiningError):
            mine_pr(env, pair, 1, rng_for(0), strict=True)
        relaxed = mine_pr(env, pair, 1, rng_for(0), strict=False)[0]
        assert relaxed.percept_order != tuple(range(5))


class TestRW:
    def test_edge_count_and_far_constraint(self, bundle, positive, env_of):
        env = env_of(positive)
        negs = mine_rw(env, positive, 3, rng_for(4), far_threshold_m=5.0)
        for neg in negs:
            assert len(neg.nodes) == len(positive.nodes)
            env.make_path(neg.nodes)
            shares_start = neg.nodes[0] == positive.nodes[0]
            shares_end = neg.nodes[-1] == positive.nodes[-1]
            assert shares_start or shares_end
            if shares_start:
                assert env.geodesic(neg.nodes[-1], positive.nodes[-1]) >= 5.0
            else:
                assert env.geodesic(neg.nodes[0], positive.nodes[0]) >= 5.0

    def test_infeasible_far_threshold(self, bundle, positive, env_of):
        env = env_of(positive)
        diameter = max(
            env.geodesic(a, b) for a in env.node_ids for b in env.node_ids
        )
        with pytest.raises(MiningError):
            mine_rw(env, positive, 1, rng_for(5), far_threshold_m=diameter + 1.0, budget=60)


class TestMineNegatives:
    def test_contracts_over_dataset(self, bundle):
        positives = bundle.split("train", "human_like")
        config = MiningConfig(seed=9)
        negs = mine_negatives(bundle.envs, positives, config)
        assert len(negs) == 3 * len(positives)
        by_source: dict[str, list] = {}
        for neg in negs:
            by_source.setdefault(source_pair_id(neg.pair_id), []).append(neg)
        assert set(by_source) == {p.pair_id for p in positives}
        for pos in positives:
            for neg in by_source[pos.pair_id]:
                assert neg.instruction.token_ids == pos.instruction.token_ids
                bundle.envs[neg.env_id].make_path(neg.nodes)

    def test_determinism(self, bundle):
        positives = bundle.split("train", "human_like")[:3]
        config = MiningConfig(seed=1)
        a = mine_negatives(bundle.envs, positives, config)
        b = mine_negatives(bundle.envs, positives, config)
        assert [(n.pair_id, n.nodes, n.percept_order) for n in a] == [
            (n.pair_id, n.nodes, n.percept_order) for n in b
        ]

    def test_provenance_round_trips_jsonl(self, bundle, tmp_path):
        positives = bundle.split("train", "human_like")[:2]
        negs = mine_negatives(bundle.envs, positives, MiningConfig(seed=2))
        f = tmp_path / "negs.jsonl"
        save_pairs(str(f), negs, bundle.vocab)
        loaded = load_pairs(str(f), bundle.vocab, envs=bundle.envs)
        assert [(p.pair_id, p.provenance, p.percept_order) for p in loaded] == [
            (p.pair_id, p.provenance, p.percept_order) for p in negs
        ]
