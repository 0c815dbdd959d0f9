"""Single executable for the full pipeline, one subcommand per stage.

Every run writes a manifest (resolved config, seed, config hash, package
version) into the output directory before any artifact, and all artifacts are
written atomically, so any output tree can be regenerated bit-identically by
replaying the manifest. Exit codes: 0 success, 1 validation error, 2 runtime
failure.

Only the ``report`` subcommand ever reads the evaluation-only latent_quality
field; every other stage goes through the loader that strips it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .agent import (
    AgentConfig,
    AgentTrainConfig,
    agent_metrics_csv,
    episodes_from_pairs,
    evaluate_agent,
    init_agent,
    load_agent,
    train_student_forcing,
)
from .common import (
    InputError,
    PathdiscError,
    atomic_write_text,
    canonical_json,
    sha256_hex,
    thread_cap,
)
from .discriminator import BIDIRECTIONAL, DiscConfig, Discriminator, load_discriminator
from .envgraph import save_environment
from .filtering import load_ranked, rank_pool, save_ranked, select
from .metrics import cdf_to_csv, export_alignment, score_cdf
from .mining import MiningConfig, mine_negatives
from .pairs import (
    PROVENANCE_POSITIVE,
    load_environments,
    load_latent_quality,
    load_pairs,
    percepts_for,
    save_pairs,
    Vocabulary,
)
from .training import (
    LabeledData,
    StageConfig,
    TrainConfig,
    build_samples,
    curriculum_train,
    load_train_state,
    report_to_csv,
    timing_log,
)
from .world import WorldSpec, dataset_stats, generate_dataset, stats_to_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; spec wants 1
        self.print_usage(sys.stderr)
        raise InputError(message)


def _dataclass_from(section: dict, cls, label: str):
    import dataclasses

    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise InputError(f"config section {label!r}: unknown keys {sorted(unknown)}")
    return cls(**section)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return doc


def _train_config_from(section: dict, seed: int | None) -> TrainConfig:
    section = dict(section)
    stages = section.pop("stages", None)
    if seed is not None:
        section["seed"] = seed
    config = _dataclass_from(section, TrainConfig, "train")
    if stages is not None:
        parsed = tuple(StageConfig(tuple(s["strategies"]), int(s["epochs"])) for s in stages)
        config = TrainConfig(**{**config.__dict__, "stages": parsed})
    return config


def _write_manifest(out_dir: str, command: str, config: dict, seed: int | None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    resolved = {"command": command, "config": config, "seed": seed, "package_version": __version__}
    resolved["config_hash"] = sha256_hex(canonical_json({"command": command, "config": config, "seed": seed}))
    atomic_write_text(os.path.join(out_dir, "manifest.json"), canonical_json(resolved) + "\n")


def _load_world_dir(data_dir: str):
    envs = load_environments(os.path.join(data_dir, "envs"))
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.json"))
    return envs, vocab


def _positives_by_split(data_dir: str, envs, vocab):
    pairs = load_pairs(os.path.join(data_dir, "pairs.jsonl"), vocab, envs=envs)
    by_split: dict[str, list] = {}
    for pair in pairs:
        if pair.provenance == PROVENANCE_POSITIVE:
            by_split.setdefault(pair.split, []).append(pair)
    return by_split


def cmd_gen_world(args) -> int:
    doc = _load_config(args.config)
    section = dict(doc.get("world", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    spec = _dataclass_from(section, WorldSpec, "world")
    _write_manifest(args.out, "gen-world", {"world": section}, spec.seed)
    bundle = generate_dataset(spec)
    env_dir = os.path.join(args.out, "envs")
    for env_id in sorted(bundle.envs):
        save_environment(bundle.envs[env_id], os.path.join(env_dir, f"{env_id}.json"))
    bundle.vocab.save(os.path.join(args.out, "vocab.json"))
    positives = [p for p in bundle.pairs if p.provenance == PROVENANCE_POSITIVE]
    augmented = bundle.augmented
    save_pairs(os.path.join(args.out, "pairs.jsonl"), positives, bundle.vocab)
    save_pairs(os.path.join(args.out, "augmented.jsonl"), augmented, bundle.vocab, latent=bundle.latent_quality)
    print(
        f"gen-world: {len(bundle.envs)} environments, {len(positives)} positives, "
        f"{len(augmented)} augmented pairs -> {args.out}"
    )
    return 0


def cmd_mine(args) -> int:
    doc = _load_config(args.config)
    section = dict(doc.get("mining", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    config = _dataclass_from(section, MiningConfig, "mining")
    _write_manifest(args.out, "mine", {"mining": section, "data": args.data}, config.seed)
    envs, vocab = _load_world_dir(args.data)
    by_split = _positives_by_split(args.data, envs, vocab)
    positives = [p for split in sorted(by_split) for p in by_split[split]]
    negatives = mine_negatives(envs, positives, config)
    save_pairs(os.path.join(args.out, "negatives.jsonl"), negatives, vocab)
    print(f"mine: {len(negatives)} negatives from {len(positives)} positives -> {args.out}")
    return 0


def _split_labeled_data(envs, positives_by_split, negatives):
    train_pairs = list(positives_by_split.get("train", []))
    val_pairs = list(positives_by_split.get("val_seen", [])) + list(positives_by_split.get("val_unseen", []))
    train_negs = [n for n in negatives if n.split == "train"]
    val_negs = [n for n in negatives if n.split != "train"]
    train = LabeledData.from_samples(build_samples(envs, train_pairs + train_negs))
    val = LabeledData.from_samples(build_samples(envs, val_pairs + val_negs))
    return train, val


def cmd_train_disc(args) -> int:
    doc = _load_config(args.config)
    disc_section = dict(doc.get("disc", {}))
    train_section = dict(doc.get("train", {}))
    if args.path_tower is not None:
        disc_section["path_tower_mode"] = args.path_tower
    config_blob = {"disc": disc_section, "train": train_section, "data": args.data, "negatives": args.negatives}
    seed = args.seed if args.seed is not None else train_section.get("seed", 0)
    _write_manifest(args.out, "train-disc", config_blob, seed)
    envs, vocab = _load_world_dir(args.data)
    train_config = _train_config_from(train_section, args.seed)
    by_split = _positives_by_split(args.data, envs, vocab)
    negatives = load_pairs(args.negatives, vocab, envs=envs)
    train, val = _split_labeled_data(envs, by_split, negatives)

    state_path = os.path.join(args.out, "train_state.ckpt")
    if args.resume:
        disc, state = load_train_state(state_path, train_config, expect_vocab_hash=vocab.vocab_hash)
        print(f"train-disc: resuming at epoch {state.global_epoch}")
    else:
        disc_config = _dataclass_from(
            {**disc_section, "vocab_size": len(vocab), "feature_dim": next(iter(envs.values())).feature_dim + 4,
             "vocab_hash": vocab.vocab_hash},
            DiscConfig,
            "disc",
        )
        disc = Discriminator.create(disc_config, seed=train_config.seed)
        state = None

    def log(row):
        val_auc = row.get("val_auc_PRRW")
        shown = "n/a" if val_auc is None else f"{val_auc:.3f}"
        print(f"epoch {row['epoch']:3d} [{row['strategies']}] loss={row['loss']:.4f} val_auc_PRRW={shown}")

    state = curriculum_train(
        disc, train, val, train_config,
        state=state, state_path=state_path, stop_after_epoch=args.stop_after_epoch, log=log,
    )
    disc.save(os.path.join(args.out, "disc.ckpt"))
    atomic_write_text(os.path.join(args.out, "report.csv"), report_to_csv(state.rows))
    atomic_write_text(os.path.join(args.out, "timing.log"), timing_log(state.rows))
    print(f"train-disc: {state.global_epoch} epochs -> {args.out}")
    return 0


def cmd_score(args) -> int:
    _write_manifest(args.out, "score", {"checkpoint": args.checkpoint, "pairs": args.pairs, "data": args.data}, None)
    envs, vocab = _load_world_dir(args.data)
    disc = load_discriminator(args.checkpoint, expect_vocab_hash=vocab.vocab_hash)
    pool = load_pairs(args.pairs, vocab, envs=envs)
    ranked = rank_pool(disc, envs, pool)
    save_ranked(os.path.join(args.out, "ranked.jsonl"), ranked)
    print(f"score: ranked {len(ranked)} pairs -> {args.out}")
    return 0


def cmd_filter(args) -> int:
    config = {
        "ranked": args.ranked,
        "pairs": args.pairs,
        "strategy": args.strategy,
        "fraction": args.fraction,
        "stratum_fraction": args.stratum_fraction,
    }
    _write_manifest(args.out, "filter", config, args.seed)
    envs, vocab = _load_world_dir(args.data)
    ranked = load_ranked(args.ranked)
    subset = select(ranked, args.strategy, args.fraction, seed=args.seed or 0,
                    stratum_fraction=args.stratum_fraction)
    wanted = {sp.pair_id for sp in subset}
    pool = load_pairs(args.pairs, vocab, envs=envs)
    by_id = {p.pair_id: p for p in pool}
    missing = sorted(wanted - set(by_id))
    if missing:
        raise InputError(f"filter: ranked ids missing from pairs file: {missing[:5]}")
    chosen = [by_id[sp.pair_id] for sp in subset]
    save_pairs(os.path.join(args.out, "subset.jsonl"), chosen, vocab)
    print(f"filter: {args.strategy} fraction={args.fraction} -> {len(chosen)} pairs -> {args.out}")
    return 0


def cmd_train_agent(args) -> int:
    doc = _load_config(args.config)
    agent_section = dict(doc.get("agent", {}))
    train_section = dict(doc.get("agent_train", {}))
    if args.seed is not None:
        train_section["seed"] = args.seed
    config_blob = {
        "agent": agent_section, "agent_train": train_section,
        "data": args.data, "pairs": args.pairs, "init_from": args.init_from,
    }
    _write_manifest(args.out, "train-agent", config_blob, train_section.get("seed", 0))
    envs, vocab = _load_world_dir(args.data)
    train_config = _dataclass_from(train_section, AgentTrainConfig, "agent_train")
    pairs = []
    for path in args.pairs.split(","):
        pairs.extend(load_pairs(path.strip(), vocab, envs=envs))
    if not pairs:
        raise InputError("train-agent: no training pairs")
    agent_config = _dataclass_from(
        {**agent_section, "vocab_size": len(vocab),
         "feature_dim": next(iter(envs.values())).feature_dim + 4, "vocab_hash": vocab.vocab_hash},
        AgentConfig,
        "agent",
    )
    agent = init_agent(agent_config, seed=train_config.seed, discriminator_checkpoint=args.init_from)
    rows = train_student_forcing(
        agent, envs, episodes_from_pairs(pairs), train_config,
        log=lambda row: print(f"epoch {row['epoch']:3d} loss={row['loss']:.4f}"),
    )
    agent.save(os.path.join(args.out, "agent.ckpt"))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=("epoch", "loss"), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({"epoch": row["epoch"], "loss": repr(row["loss"])})
    atomic_write_text(os.path.join(args.out, "report.csv"), buf.getvalue())
    atomic_write_text(os.path.join(args.out, "timing.log"), timing_log(rows))
    print(f"train-agent: {len(pairs)} pairs, {train_config.epochs} epochs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = {"agent": args.agent, "data": args.data, "splits": args.splits,
              "horizon": args.horizon, "d_th": args.d_th}
    _write_manifest(args.out, "eval", config, None)
    envs, vocab = _load_world_dir(args.data)
    agent = load_agent(args.agent, expect_vocab_hash=vocab.vocab_hash)
    by_split = _positives_by_split(args.data, envs, vocab)
    wanted = {}
    for split in args.splits.split(","):
        split = split.strip()
        if split not in by_split:
            raise InputError(f"eval: split {split!r} has no positive pairs in {args.data}")
        wanted[split] = by_split[split]
    results = evaluate_agent(agent, envs, wanted, horizon=args.horizon, d_th=args.d_th)
    atomic_write_text(os.path.join(args.out, "metrics.csv"), agent_metrics_csv(results))
    for split in sorted(results):
        row = results[split]
        print(f"{split}: PL={row['PL']:.2f} NE={row['NE']:.2f} SR={row['SR']:.3f} SPL={row['SPL']:.3f}")
    return 0


def cmd_export_alignment(args) -> int:
    config = {"checkpoint": args.checkpoint, "data": args.data, "pair_id": args.pair_id}
    _write_manifest(args.out, "export-alignment", config, None)
    envs, vocab = _load_world_dir(args.data)
    disc = load_discriminator(args.checkpoint, expect_vocab_hash=vocab.vocab_hash)
    pool = []
    for name in ("pairs.jsonl", "augmented.jsonl"):
        path = os.path.join(args.data, name)
        if os.path.exists(path):
            pool.extend(load_pairs(path, vocab, envs=envs))
    matches = [p for p in pool if p.pair_id == args.pair_id]
    if not matches:
        raise InputError(f"export-alignment: pair id {args.pair_id!r} not found in {args.data}")
    pair = matches[0]
    env = envs[pair.env_id]
    outcome = disc.score_pair(pair.instruction.token_ids, percepts_for(pair, env))
    tokens = [vocab.token(i) for i in pair.instruction.token_ids]
    order = pair.percept_order or tuple(range(len(pair.nodes)))
    steps = [pair.nodes[i] for i in order]
    paths = export_alignment(outcome.matrix, tokens, steps, os.path.join(args.out, "alignment"))
    print(f"export-alignment: {pair.pair_id} probability={outcome.probability:.4f} -> {paths['pgm']}")
    return 0


def cmd_report(args) -> int:
    config = {"data": args.data, "checkpoint": args.checkpoint, "ranked": args.ranked,
              "gap_fraction": args.gap_fraction}
    _write_manifest(args.out, "report", config, None)
    envs, vocab = _load_world_dir(args.data)
    pairs = load_pairs(os.path.join(args.data, "pairs.jsonl"), vocab, envs=envs)
    augmented_path = os.path.join(args.data, "augmented.jsonl")
    augmented = load_pairs(augmented_path, vocab, envs=envs) if os.path.exists(augmented_path) else []
    atomic_write_text(os.path.join(args.out, "stats.csv"), stats_to_csv(dataset_stats(pairs + augmented, vocab)))

    if args.checkpoint:
        disc = load_discriminator(args.checkpoint, expect_vocab_hash=vocab.vocab_hash)
        named = {
            "val_seen": [p for p in pairs if p.split == "val_seen"],
            "val_unseen": [p for p in pairs if p.split == "val_unseen"],
            "augmented": augmented,
        }
        named_scores = {}
        for name, group in named.items():
            if not group:
                continue
            named_scores[name] = [
                disc.score_pair(p.instruction.token_ids, percepts_for(p, envs[p.env_id])).probability
                for p in group
            ]
        rows, means = score_cdf(named_scores)
        atomic_write_text(os.path.join(args.out, "cdf.csv"), cdf_to_csv(rows))
        atomic_write_text(
            os.path.join(args.out, "means.csv"),
            "dataset,mean\n" + "".join(f"{k},{repr(v)}\n" for k, v in sorted(means.items())),
        )
        for name in sorted(means):
            print(f"mean probability on {name}: {means[name]:.4f}")

    if args.ranked:
        # The one sanctioned consumer of the evaluation-only latent quality field.
        latent = load_latent_quality(augmented_path)
        ranked = load_ranked(args.ranked)
        top = select(ranked, "top", args.gap_fraction)
        bottom = select(ranked, "bottom", args.gap_fraction)
        top_quality = [latent[sp.pair_id] for sp in top if sp.pair_id in latent]
        bottom_quality = [latent[sp.pair_id] for sp in bottom if sp.pair_id in latent]
        if not top_quality or not bottom_quality:
            raise InputError("report: ranked pool does not overlap the augmented pairs' latent sidecar")
        top_mean = float(np.mean(top_quality))
        bottom_mean = float(np.mean(bottom_quality))
        text = (
            "segment,fraction,mean_latent_quality\n"
            f"top,{args.gap_fraction},{repr(top_mean)}\n"
            f"bottom,{args.gap_fraction},{repr(bottom_mean)}\n"
            f"gap,{args.gap_fraction},{repr(top_mean - bottom_mean)}\n"
        )
        atomic_write_text(os.path.join(args.out, "quality_gap.csv"), text)
        print(f"quality gap at {args.gap_fraction:.0%}: top={top_mean:.3f} bottom={bottom_mean:.3f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pathdisc", description="Instruction-path discriminator pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen-world", help="generate environments, splits and the augmented pool")
    common(p)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("mine", help="mine PS/PR/RW negatives for every positive pair")
    p.add_argument("--data", required=True, help="gen-world output directory")
    common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train-disc", help="train the discriminator (curriculum or single stage)")
    p.add_argument("--data", required=True)
    p.add_argument("--negatives", required=True, help="negatives JSONL from mine")
    p.add_argument("--path-tower", choices=("bidirectional", "unidirectional"), default=None)
    p.add_argument("--resume", action="store_true", help="resume from train_state.ckpt in --out")
    p.add_argument("--stop-after-epoch", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train_disc)

    p = sub.add_parser("score", help="rank a pairs file by discriminator probability")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="materialize a ranked subset (top/bottom/random strategies)")
    p.add_argument("--ranked", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", required=True,
                   choices=("top", "bottom", "random-full", "random-top", "random-bottom"))
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--stratum-fraction", type=float, default=0.4)
    common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("train-agent", help="train the follower agent with student forcing")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True, help="comma-separated pairs JSONL files")
    p.add_argument("--init-from", default=None, help="warm-start discriminator checkpoint")
    common(p)
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("eval", help="evaluate an agent on validation splits")
    p.add_argument("--agent", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="val_seen,val_unseen")
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--d-th", type=float, default=3.0)
    common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-alignment", help="export one pair's alignment matrix (CSV + PGM)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pair-id", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_export_alignment)

    p = sub.add_parser("report", help="dataset stats, score CDFs and the latent quality gap")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--ranked", default=None)
    p.add_argument("--gap-fraction", type=float, default=0.05)
    common(p, seed=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        thread_cap()
        args = parser.parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PathdiscError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
