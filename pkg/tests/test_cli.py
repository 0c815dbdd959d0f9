import hashlib
import json
import os

import pytest

from pathdisc.cli import main

MINI_CONFIG = {
    "world": {
        "seed": 404,
        "train_envs": 2,
        "unseen_envs": 1,
        "nodes_per_env": 12,
        "categories": 6,
        "train_paths": 4,
        "val_seen_paths": 2,
        "val_unseen_paths": 2,
        "augmented_pairs": 12,
        "instructions_per_path": 1,
    },
    "mining": {"seed": 1},
    "disc": {"embed_dim": 6, "hidden_dim": 4},
    "train": {
        "seed": 2,
        "batch_size": 16,
        "stages": [{"strategies": ["PS"], "epochs": 1}, {"strategies": ["PR", "RW"], "epochs": 1}],
    },
    "agent": {"embed_dim": 6, "hidden_dim": 4},
    "agent_train": {"seed": 3, "epochs": 1, "batch_size": 4},
}


def tree_digest(root):
    """Digest of every file under root except timing sidecars."""
    digest = hashlib.sha256()
    for base, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            if name == "timing.log":
                continue
            path = os.path.join(base, name)
            digest.update(os.path.relpath(path, root).encode())
            digest.update(open(path, "rb").read())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.json"
    config.write_text(json.dumps(MINI_CONFIG))
    data = str(root / "data")
    assert main(["gen-world", "--config", str(config), "--out", data]) == 0
    mined = str(root / "mined")
    assert main(["mine", "--config", str(config), "--data", data, "--out", mined]) == 0
    disc = str(root / "disc")
    assert (
        main(
            ["train-disc", "--config", str(config), "--data", data,
             "--negatives", os.path.join(mined, "negatives.jsonl"), "--out", disc]
        )
        == 0
    )
    return root, str(config), data, mined, disc


class TestPipeline:
    def test_gen_world_is_bit_deterministic(self, pipeline, tmp_path):
        root, config, data, *_ = pipeline
        again = str(tmp_path / "data2")
        assert main(["gen-world", "--config", config, "--out", again]) == 0
        assert tree_digest(data) == tree_digest(again)

    def test_mine_is_bit_deterministic(self, pipeline, tmp_path):
        root, config, data, mined, _ = pipeline
        again = str(tmp_path / "mined2")
        assert main(["mine", "--config", config, "--data", data, "--out", again]) == 0
        assert tree_digest(mined) == tree_digest(again)

    def test_manifest_written_with_hash(self, pipeline):
        _, _, data, *_ = pipeline
        manifest = json.load(open(os.path.join(data, "manifest.json")))
        assert manifest["command"] == "gen-world"
        assert len(manifest["config_hash"]) == 64
        assert manifest["package_version"]

    def test_end_to_end_score_filter_agent_eval(self, pipeline, tmp_path):
        root, config, data, mined, disc = pipeline
        scored = str(tmp_path / "scored")
        assert (
            main(["score", "--checkpoint", os.path.join(disc, "disc.ckpt"), "--data", data,
                  "--pairs", os.path.join(data, "augmented.jsonl"), "--out", scored])
            == 0
        )
        subset = str(tmp_path / "subset")
        assert (
            main(["filter", "--ranked", os.path.join(scored, "ranked.jsonl"),
                  "--pairs", os.path.join(data, "augmented.jsonl"), "--data", data,
                  "--strategy", "top", "--fraction", "0.5", "--out", subset])
            == 0
        )
        agent = str(tmp_path / "agent")
        assert (
            main(["train-agent", "--config", config, "--data", data,
                  "--pairs", os.path.join(subset, "subset.jsonl"), "--out", agent])
            == 0
        )
        evaluated = str(tmp_path / "eval")
        assert (
            main(["eval", "--agent", os.path.join(agent, "agent.ckpt"), "--data", data,
                  "--out", evaluated])
            == 0
        )
        header, *rows = open(os.path.join(evaluated, "metrics.csv")).read().strip().splitlines()
        assert header == "split,PL,NE,SR,SPL"
        assert sorted(r.split(",")[0] for r in rows) == ["val_seen", "val_unseen"]

    def test_export_alignment_and_report(self, pipeline, tmp_path):
        root, config, data, mined, disc = pipeline
        pair_id = json.loads(open(os.path.join(data, "pairs.jsonl")).readline())["pair_id"]
        exported = str(tmp_path / "export")
        assert (
            main(["export-alignment", "--checkpoint", os.path.join(disc, "disc.ckpt"),
                  "--data", data, "--pair-id", pair_id, "--out", exported])
            == 0
        )
        assert open(os.path.join(exported, "alignment.pgm"), "rb").read().startswith(b"P5 ")
        scored = str(tmp_path / "scored-rep")
        main(["score", "--checkpoint", os.path.join(disc, "disc.ckpt"), "--data", data,
              "--pairs", os.path.join(data, "augmented.jsonl"), "--out", scored])
        reported = str(tmp_path / "report")
        assert (
            main(["report", "--data", data, "--checkpoint", os.path.join(disc, "disc.ckpt"),
                  "--ranked", os.path.join(scored, "ranked.jsonl"), "--gap-fraction", "0.25",
                  "--out", reported])
            == 0
        )
        for name in ("stats.csv", "cdf.csv", "means.csv", "quality_gap.csv"):
            assert os.path.exists(os.path.join(reported, name)), name

    def test_no_temp_files_left_behind(self, pipeline):
        root, *_ = pipeline
        leftovers = [
            os.path.join(base, f)
            for base, _, files in os.walk(root)
            for f in files
            if f.startswith(".tmp-") or f.endswith("~")
        ]
        assert leftovers == []


class TestValidation:
    def test_unknown_flag_exits_one(self):
        assert main(["gen-world", "--out", "/tmp/x", "--bogus"]) == 1

    def test_unknown_command_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_filter_stratum_overflow_exits_one(self, pipeline, tmp_path, capsys):
        root, config, data, mined, disc = pipeline
        scored = str(tmp_path / "scored")
        main(["score", "--checkpoint", os.path.join(disc, "disc.ckpt"), "--data", data,
              "--pairs", os.path.join(data, "augmented.jsonl"), "--out", scored])
        code = main(["filter", "--ranked", os.path.join(scored, "ranked.jsonl"),
                     "--pairs", os.path.join(data, "augmented.jsonl"), "--data", data,
                     "--strategy", "random-top", "--fraction", "0.5", "--out", str(tmp_path / "s")])
        assert code == 1
        assert "stratum" in capsys.readouterr().err

    def test_missing_input_exits_one(self, tmp_path):
        assert main(["mine", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1

    def test_bad_config_schema_exits_one(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"world": {"sides": 3}}))
        assert main(["gen-world", "--config", str(config), "--out", str(tmp_path / "w")]) == 1

    def test_thread_cap_env_validated(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PATHDISC_THREADS", "zero")
        assert main(["gen-world", "--out", str(tmp_path / "w")]) == 1
        monkeypatch.setenv("PATHDISC_THREADS", "2")
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"world": MINI_CONFIG["world"]}))
        assert main(["gen-world", "--config", str(config), "--out", str(tmp_path / "w2")]) == 0
