"""Discriminator training: logistic objective, staged curriculum, exact resume.

The default objective is pointwise binary cross-entropy on the logistic
probability of the raw alignment score, computed in the stabilized
softplus form so the loss is finite for any finite score. A pairwise hinge
on positive-negative score gaps is available as a config toggle.

A curriculum is an ordered list of stages, each naming the negative
strategies it trains against and its epoch budget; parameters carry over
between stages. Training state (parameters, momentum, rng state, telemetry
rows) checkpoints after every epoch, and resuming from that state replays
the uninterrupted run bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, require_shapes, save_checkpoint
from .common import CheckpointError, InputError, TrainingError, rng_for
from .discriminator import DiscConfig, Discriminator, param_shapes
from .metrics import auc
from .mining import STRATEGIES, source_pair_id
from .pairs import PROVENANCE_NEGATIVE, percepts_for

_STRATEGY_BY_PROVENANCE = {v: k for k, v in PROVENANCE_NEGATIVE.items()}


@dataclass(frozen=True)
class StageConfig:
    strategies: tuple[str, ...]
    epochs: int


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    negatives_per_positive: int = 1
    loss: str = "bce"  # or "pairwise"
    margin: float = 1.0
    seed: int = 0
    stages: tuple[StageConfig, ...] = (
        StageConfig(("PS",), 30),
        StageConfig(("PR", "RW"), 30),
    )

    def validate(self) -> None:
        if self.batch_size < 1 or self.negatives_per_positive < 0:
            raise InputError("train config: batch_size must be >= 1 and ratio >= 0")
        if self.learning_rate < 0 or not (0 <= self.momentum < 1) or self.clip_norm <= 0:
            raise InputError("train config: need lr >= 0, momentum in [0, 1), clip_norm > 0")
        if self.loss not in ("bce", "pairwise"):
            raise InputError(f"train config: unknown loss {self.loss!r}")
        if not self.stages:
            raise InputError("train config: at least one stage is required")
        for stage in self.stages:
            if not stage.strategies:
                raise InputError("train config: every stage needs a non-empty strategy set")
            for s in stage.strategies:
                if s not in STRATEGIES:
                    raise InputError(f"train config: unknown strategy {s!r}")
            if stage.epochs < 0:
                raise InputError("train config: stage epochs must be >= 0")

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)


@dataclass(frozen=True)
class Sample:
    pair_id: str
    source_id: str
    token_ids: np.ndarray
    percepts: np.ndarray
    label: int
    strategy: str | None


def build_samples(envs, pairs) -> list[Sample]:
    """Materialize token ids and percepts once so epochs stay cheap."""
    samples = []
    for pair in pairs:
        strategy = _STRATEGY_BY_PROVENANCE.get(pair.provenance)
        samples.append(
            Sample(
                pair_id=pair.pair_id,
                source_id=source_pair_id(pair.pair_id),
                token_ids=np.asarray(pair.instruction.token_ids, dtype=np.int64),
                percepts=percepts_for(pair, envs[pair.env_id]),
                label=0 if strategy else 1,
                strategy=strategy,
            )
        )
    return samples


@dataclass
class LabeledData:
    positives: list[Sample]
    negatives: dict[str, list[Sample]] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples) -> "LabeledData":
        data = cls(positives=[])
        for s in samples:
            if s.strategy is None:
                data.positives.append(s)
            else:
                data.negatives.setdefault(s.strategy, []).append(s)
        return data

    def select_negatives(self, strategies, per_positive: int) -> list[Sample]:
        chosen: list[Sample] = []
        for strategy in strategies:
            by_source: dict[str, list[Sample]] = {}
            for s in self.negatives.get(strategy, []):
                by_source.setdefault(s.source_id, []).append(s)
            for source in sorted(by_source):
                group = sorted(by_source[source], key=lambda s: s.pair_id)
                chosen.extend(group[:per_positive])
        return chosen


def raw_scores(disc: Discriminator, samples) -> list[Tensor]:
    return [disc.raw_score(s.token_ids, s.percepts)[0] for s in samples]


def _bce_loss_and_scores(disc: Discriminator, batch) -> tuple[Tensor, list[tuple[float, int]]]:
    if not batch:
        raise InputError("compute_loss: empty batch")
    total = None
    scored = []
    for sample in batch:
        s = disc.raw_score(sample.token_ids, sample.percepts)[0]
        term = ad.softplus(s) if sample.label == 0 else ad.sub(ad.softplus(s), s)
        total = term if total is None else ad.add(total, term)
        scored.append((float(ad._sigmoid(s.data.reshape(1))[0]), sample.label))
    return total * (1.0 / len(batch)), scored


def compute_loss(disc: Discriminator, batch) -> Tensor:
    """Mean binary cross-entropy of sigmoid(raw score) against the pair label."""
    return _bce_loss_and_scores(disc, batch)[0]


def compute_pairwise_loss(disc: Discriminator, groups, margin: float) -> Tensor:
    """Mean hinge on score gaps: relu(margin - (s_pos - s_neg)) per mined pair."""
    total = None
    count = 0
    for positive, negatives in groups:
        s_pos = disc.raw_score(positive.token_ids, positive.percepts)[0]
        for negative in negatives:
            s_neg = disc.raw_score(negative.token_ids, negative.percepts)[0]
            term = ad.relu(ad.sub(Tensor(margin), ad.sub(s_pos, s_neg)))
            total = term if total is None else ad.add(total, term)
            count += 1
    if total is None:
        raise InputError("compute_pairwise_loss: no positive-negative pairs in batch")
    return total * (1.0 / count)


class MomentumSgd:
    """SGD with classical momentum and global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float, momentum: float, clip_norm: float):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        names = sorted(self.params)
        sq = 0.0
        for name in names:
            g = self.params[name].grad
            sq += float((g * g).sum())
        norm = sq**0.5
        scale = 1.0 if norm <= self.clip_norm else self.clip_norm / norm
        for name in names:
            p = self.params[name]
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * scale
            p.data -= self.learning_rate * v


def probabilities(disc: Discriminator, samples) -> list[float]:
    return [disc.score_pair(s.token_ids, s.percepts).probability for s in samples]


def validation_aucs(disc: Discriminator, val: LabeledData, per_positive: int) -> dict[str, float | None]:
    pos_scored = [(p, 1) for p in probabilities(disc, val.positives)]
    out: dict[str, float | None] = {}
    neg_probs: dict[str, list[float]] = {}
    for strategy in STRATEGIES:
        negs = val.select_negatives((strategy,), per_positive)
        neg_probs[strategy] = probabilities(disc, negs) if negs else []
        if pos_scored and neg_probs[strategy]:
            out[f"val_auc_{strategy}"] = auc(pos_scored + [(p, 0) for p in neg_probs[strategy]])
        else:
            out[f"val_auc_{strategy}"] = None
    hard = neg_probs["PR"] + neg_probs["RW"]
    out["val_auc_PRRW"] = auc(pos_scored + [(p, 0) for p in hard]) if pos_scored and hard else None
    return out


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly."""

    optimizer: MomentumSgd
    rng: np.random.Generator
    global_epoch: int = 0
    rows: list[dict] = field(default_factory=list)


def _epoch_batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        yield order[lo : lo + batch_size]


def _pairwise_groups(positives, negatives):
    by_source: dict[str, list[Sample]] = {}
    for neg in negatives:
        by_source.setdefault(neg.source_id, []).append(neg)
    return [(pos, sorted(by_source.get(pos.pair_id, []), key=lambda s: s.pair_id)) for pos in positives]


def _train_one_epoch(disc, train, stage, config, state) -> tuple[float, float | None]:
    epoch_scored: list[tuple[float, int]] = []
    losses: list[tuple[float, int]] = []
    if config.loss == "bce":
        dataset = train.positives + train.select_negatives(stage.strategies, config.negatives_per_positive)
        order = state.rng.permutation(len(dataset))
        for batch_idx in _epoch_batches(order, config.batch_size):
            batch = [dataset[i] for i in batch_idx]
            ad.zero_grads(list(disc.params.values()))
            loss, scored = _bce_loss_and_scores(disc, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {state.global_epoch}, "
                    f"batch starting at sample {int(batch_idx[0])}"
                )
            loss.backward()
            state.optimizer.step()
            losses.append((value, len(batch)))
            epoch_scored.extend(scored)
    else:
        groups = _pairwise_groups(
            train.positives, train.select_negatives(stage.strategies, config.negatives_per_positive)
        )
        groups = [g for g in groups if g[1]]
        order = state.rng.permutation(len(groups))
        step_groups = max(1, config.batch_size // (1 + config.negatives_per_positive * len(stage.strategies)))
        for batch_idx in _epoch_batches(order, step_groups):
            batch = [groups[i] for i in batch_idx]
            ad.zero_grads(list(disc.params.values()))
            loss = compute_pairwise_loss(disc, batch, config.margin)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite pairwise loss at epoch {state.global_epoch}")
            loss.backward()
            state.optimizer.step()
            n_terms = sum(len(g[1]) for g in batch)
            losses.append((value, n_terms))
            with ad.no_grad():
                for pos, negs in batch:
                    for sample in (pos, *negs):
                        s = disc.raw_score(sample.token_ids, sample.percepts)[0]
                        epoch_scored.append((float(ad._sigmoid(s.data.reshape(1))[0]), sample.label))
    total_weight = sum(w for _, w in losses)
    mean_loss = sum(v * w for v, w in losses) / total_weight if total_weight else 0.0
    labels = {label for _, label in epoch_scored}
    train_auc = auc(epoch_scored) if labels == {0, 1} else None
    return mean_loss, train_auc


def _stage_of_epoch(config: TrainConfig, epoch: int) -> tuple[int, StageConfig]:
    cursor = 0
    for idx, stage in enumerate(config.stages):
        if epoch < cursor + stage.epochs:
            return idx, stage
        cursor += stage.epochs
    raise InputError(f"epoch {epoch} outside the configured budget {config.total_epochs}")


def curriculum_train(
    disc: Discriminator,
    train: LabeledData,
    val: LabeledData | None,
    config: TrainConfig,
    state: TrainState | None = None,
    state_path: str | None = None,
    stop_after_epoch: int | None = None,
    log=None,
) -> TrainState:
    """Run the staged curriculum, carrying parameters (and state) across stages."""
    config.validate()
    if state is None:
        state = TrainState(
            optimizer=MomentumSgd(disc.params, config.learning_rate, config.momentum, config.clip_norm),
            rng=rng_for(config.seed, "train-shuffle"),
        )
    while state.global_epoch < config.total_epochs:
        if stop_after_epoch is not None and state.global_epoch >= stop_after_epoch:
            break
        stage_idx, stage = _stage_of_epoch(config, state.global_epoch)
        started = time.perf_counter()
        mean_loss, train_auc = _train_one_epoch(disc, train, stage, config, state)
        row = {
            "epoch": state.global_epoch,
            "stage": stage_idx,
            "strategies": "+".join(stage.strategies),
            "loss": mean_loss,
            "train_auc": train_auc,
        }
        if val is not None:
            row.update(validation_aucs(disc, val, config.negatives_per_positive))
        row["seconds"] = time.perf_counter() - started
        state.rows.append(row)
        state.global_epoch += 1
        if log is not None:
            log(row)
        if state_path is not None:
            save_train_state(state_path, disc, config, state)
    return state


def train_stage(disc: Discriminator, train: LabeledData, val, config: TrainConfig, stage: StageConfig) -> TrainState:
    """Single-stage training; equivalent to a one-stage curriculum."""
    single = TrainConfig(
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        clip_norm=config.clip_norm,
        negatives_per_positive=config.negatives_per_positive,
        loss=config.loss,
        margin=config.margin,
        seed=config.seed,
        stages=(stage,),
    )
    return curriculum_train(disc, train, val, single)


REPORT_COLUMNS = (
    "epoch",
    "stage",
    "strategies",
    "loss",
    "train_auc",
    "val_auc_PS",
    "val_auc_PR",
    "val_auc_RW",
    "val_auc_PRRW",
)


def report_to_csv(rows) -> str:
    """Deterministic telemetry CSV; wall-clock lives in the timing sidecar."""
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        for key in REPORT_COLUMNS:
            value = out.get(key)
            if isinstance(value, float):
                out[key] = repr(value)
            elif value is None:
                out[key] = ""
        writer.writerow(out)
    return buf.getvalue()


def timing_log(rows) -> str:
    return "".join(f"epoch {row['epoch']}: {row.get('seconds', 0.0):.3f}s\n" for row in rows)


def save_train_state(path: str, disc: Discriminator, config: TrainConfig, state: TrainState) -> None:
    arrays = disc.arrays()
    for name, v in state.optimizer.velocity.items():
        arrays[f"mom.{name}"] = v.copy()
    meta = {
        "kind": "train_state",
        "model": disc.checkpoint_meta(),
        "rng_state": _encode_rng(state.rng),
        "global_epoch": state.global_epoch,
        "rows": state.rows,
        "optimizer": {
            "learning_rate": config.learning_rate,
            "momentum": config.momentum,
            "clip_norm": config.clip_norm,
        },
    }
    save_checkpoint(path, meta, arrays)


def load_train_state(path: str, config: TrainConfig, expect_vocab_hash: str | None = None):
    """Restore (discriminator, state) for an exact resume."""
    from .discriminator import config_from_meta

    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a train_state")
    disc_config = config_from_meta(meta["model"], expect_vocab_hash)
    shapes = param_shapes(disc_config)
    expected = dict(shapes)
    expected.update({f"mom.{name}": shape for name, shape in shapes.items()})
    require_shapes(path, arrays, expected)
    params = {name: Tensor(arrays[name], requires_grad=True) for name in shapes}
    disc = Discriminator(disc_config, params)
    optimizer = MomentumSgd(disc.params, config.learning_rate, config.momentum, config.clip_norm)
    for name in shapes:
        optimizer.velocity[name] = arrays[f"mom.{name}"].copy()
    rng = rng_for(0)
    rng.bit_generator.state = _decode_rng(meta["rng_state"])
    state = TrainState(
        optimizer=optimizer,
        rng=rng,
        global_epoch=int(meta["global_epoch"]),
        rows=list(meta["rows"]),
    )
    return disc, state


def _encode_rng(rng: np.random.Generator) -> dict:
    raw = rng.bit_generator.state
    return {"bit_generator": raw["bit_generator"], "state": str(raw["state"]["state"]),
            "inc": str(raw["state"]["inc"]), "has_uint32": raw["has_uint32"], "uinteger": raw["uinteger"]}


def _decode_rng(encoded: dict) -> dict:
    return {
        "bit_generator": encoded["bit_generator"],
        "state": {"state": int(encoded["state"]), "inc": int(encoded["inc"])},
        "has_uint32": int(encoded["has_uint32"]),
        "uinteger": int(encoded["uinteger"]),
    }
