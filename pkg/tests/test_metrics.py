import numpy as np
import pytest

from pathdisc.common import InputError, MetricError
from pathdisc.envgraph import EnvironmentGraph
from pathdisc.metrics import (
    aggregate_metrics,
    auc,
    cdf_to_csv,
    diagonality,
    export_alignment,
    matrix_from_csv,
    matrix_to_csv,
    matrix_to_pgm,
    nav_metrics,
    score_cdf,
)


def auc_bruteforce(scored):
    """Independent O(P*N) oracle: concordant pairs plus half credit for ties."""
    pos = [float(s) for s, y in scored if y]
    neg = [float(s) for s, y in scored if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        scored = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        assert auc(scored) == 1.0

    def test_all_ties_is_half(self):
        scored = [(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]
        assert auc(scored) == 0.5

    def test_hand_case_three_quarters(self):
        scored = [(0.9, 1), (0.8, 0), (0.7, 1), (0.1, 0)]
        assert auc_bruteforce(scored) == 0.75
        assert auc(scored) == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auc([(0.5, 1), (0.7, 1)])

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(2, 60))
            scores = np.round(rng.uniform(size=n), 2)  # rounding induces ties
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            scored = list(zip(scores.tolist(), labels.tolist()))
            assert auc(scored) == auc_bruteforce(scored)


@pytest.fixture
def env():
    nodes = {f"n{i}": (np.array([2.0 * i, 0.0, 0.0]), np.zeros(2)) for i in range(8)}
    edges = [(f"n{i}", f"n{i + 1}", 2.0) for i in range(7)]
    return EnvironmentGraph("line", nodes, edges)


class TestNavMetrics:
    def test_identity_episode(self, env):
        ref = env.make_path([f"n{i}" for i in range(4)])
        m = nav_metrics(env, ref, ref)
        assert m["NE"] == 0.0 and m["SR"] == 1.0 and m["SPL"] == 1.0
        assert m["PL"] == pytest.approx(6.0)

    def test_threshold_failure(self, env):
        ref = env.make_path(["n0", "n1", "n2"])
        pred = env.make_path(["n0", "n1", "n2", "n3", "n4"])  # ends 4 m past ref end
        m = nav_metrics(env, ref, pred, d_th=3.0)
        assert m["NE"] == pytest.approx(4.0)
        assert m["SR"] == 0.0 and m["SPL"] == 0.0

    def test_spl_half_for_doubled_path(self, env):
        # Optimal 6 m, successful prediction of length 12 m -> SPL = 0.5.
        ref = env.make_path(["n0", "n1", "n2", "n3"])
        pred = env.make_path(["n0", "n1", "n2", "n3", "n4", "n5", "n4"])
        assert env.path_length(pred) == pytest.approx(12.0)
        m = nav_metrics(env, ref, pred)
        assert m["SR"] == 1.0
        assert m["SPL"] == pytest.approx(0.5)

    def test_cross_environment_rejected(self, env):
        other = EnvironmentGraph(
            ".other",
            {"a": (np.zeros(3), np.zeros(2)), "b": (np.ones(3), np.zeros(2))},
            [("a", "b", 1.0)],
        )
        ref = env.make_path(["n0", "n1"])
        with pytest.raises(InputError):
            nav_metrics(env, ref, other.make_path(["a", "b"]))

    def test_spl_bounded_by_sr_property(self, env):
        rng = np.random.default_rng(1)
        ids = env.node_ids
        rows = []
        for _ in range(300):
            a, b = sorted(rng.choice(len(ids), size=2, replace=False))
            ref = env.shortest_path(ids[a], ids[b])
            walk = [ids[a]]
            for _ in range(int(rng.integers(1, 7))):
                nbrs = env.neighbors(walk[-1])
                walk.append(nbrs[int(rng.integers(len(nbrs)))])
            pred = env.make_path(walk)
            m = nav_metrics(env, ref, pred)
            assert 0.0 <= m["SPL"] <= m["SR"] <= 1.0
            if m["PL"] <= env.geodesic(ref.nodes[0], ref.nodes[-1]):
                assert m["SPL"] == m["SR"]
            rows.append(m)
        agg = aggregate_metrics(rows)
        assert set(agg) == {"PL", "NE", "SR", "SPL"}


class TestScoreCdf:
    def test_constant_scores(self):
        rows, means = score_cdf({"d": [0.4, 0.4, 0.4]})
        assert means["d"] == pytest.approx(0.4)
        assert [r["cdf"] for r in rows] == pytest.approx([1 / 3, 2 / 3, 1.0])

    def test_nondecreasing_and_ends_at_one(self):
        rng = np.random.default_rng(2)
        rows, _ = score_cdf({"x": rng.uniform(size=50).tolist()})
        cdf = [r["cdf"] for r in rows]
        assert all(a <= b for a, b in zip(cdf, cdf[1:]))
        assert cdf[-1] == 1.0
        scores = [r["score"] for r in rows]
        assert scores == sorted(scores)

    def test_hand_mean(self):
        _, means = score_cdf({"m": [0.2, 0.4, 0.9]})
        assert means["m"] == pytest.approx(0.5)

    def test_csv_has_all_rows(self):
        rows, _ = score_cdf({"a": [0.1, 0.2], "b": [0.3]})
        text = cdf_to_csv(rows)
        assert text.count("\n") == 4  # header + 3 rows


class TestAlignmentExport:
    def test_pgm_header_for_3x4(self):
        a = np.arange(12.0).reshape(3, 4)
        blob = matrix_to_pgm(a)
        assert blob.startswith(b"P5 4 3 255\n")
        assert len(blob) == len(b"P5 4 3 255\n") + 12

    def test_constant_matrix_is_mid_gray(self):
        blob = matrix_to_pgm(np.full((2, 2), 7.0))
        assert set(blob[len(b"P5 2 2 255\n") :]) == {128}

    def test_darker_means_higher(self):
        blob = matrix_to_pgm(np.array([[0.0, 1.0]]))
        pixels = blob[len(b"P5 2 1 255\n") :]
        assert pixels[0] == 255 and pixels[1] == 0

    def test_csv_round_trip(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 5))
        back = matrix_from_csv(matrix_to_csv(a))
        assert np.abs(back - a).max() <= 1e-12

    def test_export_writes_three_files(self, tmp_path):
        a = np.arange(6.0).reshape(2, 3)
        paths = export_alignment(a, ["tok0", "tok1"], ["s0", "s1", "s2"], str(tmp_path / "al"))
        import json

        assert matrix_from_csv(open(paths["csv"]).read()).shape == (2, 3)
        labels = json.load(open(paths["labels"]))
        assert labels == {"tokens": ["tok0", "tok1"], "steps": ["s0", "s1", "s2"]}
        assert open(paths["pgm"], "rb").read().startswith(b"P5 3 2 255\n")


class TestDiagonality:
    def test_identity_pattern(self):
        assert diagonality(np.eye(5)) == pytest.approx(1.0)

    def test_constant_matrix_degenerate(self):
        assert diagonality(np.ones((4, 4))) == 0.0

    def test_antidiagonal_pattern(self):
        assert diagonality(np.eye(5)[::-1]) == pytest.approx(-1.0)

    def test_requires_two_by_two(self):
        with pytest.raises(MetricError):
            diagonality(np.ones((1, 5)))
