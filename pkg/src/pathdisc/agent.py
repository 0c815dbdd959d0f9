"""Toy navigation agent: instruction-conditioned policy over graph neighbors.

The action set at a node is one candidate per neighbor (neighbor base feature
plus the orientation 4-vector toward it) and STOP (zero feature). The policy
LSTM consumes the previous action's projected feature, attends over the
instruction states with its hidden state, and scores each candidate by the dot
product of the candidate's projected feature with a learned query built from
(hidden state, attended context).

Training uses student forcing: actions are sampled from the policy while the
cross-entropy target at every step is the shortest-path action toward the goal
(STOP when already there). Evaluation decodes greedily.

The instruction tower and the visual projection + forward LSTM share parameter
names with the discriminator, so a unidirectional-path-tower checkpoint warm
starts the agent's encoders verbatim; the action-scorer head is always drawn
from its own rng stream, identical between random and transfer init.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, require_shapes, save_checkpoint
from .common import CheckpointError, InputError, TrainingError, rng_for
from .discriminator import INIT_SCALE, UNIDIRECTIONAL, encode_sequence, init_cell
from .envgraph import EnvironmentGraph, Path
from .metrics import aggregate_metrics, nav_metrics
from .pairs import InstructionPathPair, heading_features

STOP = "<stop>"


@dataclass(frozen=True)
class AgentConfig:
    vocab_size: int
    feature_dim: int  # percept width D + 4
    embed_dim: int = 16
    hidden_dim: int = 32  # per-direction instruction hidden size
    vocab_hash: str = ""

    @property
    def policy_dim(self) -> int:
        # Matches the instruction tower output and a unidirectional path tower.
        return 2 * self.hidden_dim


def agent_param_shapes(config: AgentConfig) -> dict[str, tuple[int, ...]]:
    e, h, p = config.embed_dim, config.hidden_dim, config.policy_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, e)}
    for direction in ("fwd", "bwd"):
        shapes[f"instr.{direction}.wx"] = (e, 4 * h)
        shapes[f"instr.{direction}.wh"] = (h, 4 * h)
        shapes[f"instr.{direction}.b"] = (1, 4 * h)
    shapes["path.proj.w"] = (config.feature_dim, e)
    shapes["path.proj.b"] = (1, e)
    shapes["policy.wx"] = (e, 4 * p)
    shapes["policy.wh"] = (p, 4 * p)
    shapes["policy.b"] = (1, 4 * p)
    shapes["head.w"] = (2 * p, e)
    shapes["head.b"] = (1, e)
    return shapes


def _random_arrays(config: AgentConfig, seed: int) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    rng = rng_for(seed, "agent", "encoder")
    arrays["embed"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.vocab_size, config.embed_dim))
    for direction in ("fwd", "bwd"):
        cell = init_cell(rng_for(seed, "agent", "instr", direction), config.embed_dim, config.hidden_dim)
        for key, value in cell.items():
            arrays[f"instr.{direction}.{key}"] = value
    rng = rng_for(seed, "agent", "proj")
    arrays["path.proj.w"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.feature_dim, config.embed_dim))
    arrays["path.proj.b"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(1, config.embed_dim))
    cell = init_cell(rng_for(seed, "agent", "policy-cell"), config.embed_dim, config.policy_dim)
    for key, value in cell.items():
        arrays[f"policy.{key}"] = value
    rng = rng_for(seed, "agent", "head")
    arrays["head.w"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(2 * config.policy_dim, config.embed_dim))
    arrays["head.b"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(1, config.embed_dim))
    return arrays


class FollowerAgent:
    def __init__(self, config: AgentConfig, params: dict[str, Tensor]):
        expected = agent_param_shapes(config)
        for name, shape in expected.items():
            if name not in params or params[name].data.shape != shape:
                raise CheckpointError(f"agent params: {name!r} missing or mis-shaped (expected {shape})")
        surplus = sorted(set(params) - set(expected))
        if surplus:
            raise CheckpointError(f"agent params: unexpected arrays {surplus}")
        self.config = config
        self.params = params

    @property
    def trainable(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def encode_instruction(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        emb = ad.take_rows(self.params["embed"], ids)
        return encode_sequence(self.params, "instr", emb, bidirectional=True)

    def checkpoint_meta(self) -> dict:
        return {
            "kind": "agent",
            "dims": {
                "vocab_size": self.config.vocab_size,
                "feature_dim": self.config.feature_dim,
                "embed_dim": self.config.embed_dim,
                "hidden_dim": self.config.hidden_dim,
            },
            "vocab_hash": self.config.vocab_hash,
        }

    def save(self, path: str) -> None:
        save_checkpoint(path, self.checkpoint_meta(), {n: t.data.copy() for n, t in self.params.items()})


def init_agent(config: AgentConfig, seed: int, discriminator_checkpoint: str | None = None) -> FollowerAgent:
    """Random init, or warm start of both encoders from a discriminator checkpoint.

    Transfer copies the token embedding, the instruction bi-LSTM, the visual
    projection, and the forward path LSTM (into the policy cell) verbatim. The
    action-scorer head comes from its own stream either way.
    """
    arrays = _random_arrays(config, seed)
    if discriminator_checkpoint is not None:
        from .discriminator import config_from_meta, param_shapes

        meta, ckpt = load_checkpoint(discriminator_checkpoint)
        disc_config = config_from_meta(meta, expect_vocab_hash=config.vocab_hash or None)
        if disc_config.path_tower_mode != UNIDIRECTIONAL:
            raise CheckpointError(
                "transfer init needs a unidirectional path tower: a bidirectional visual encoder "
                "cannot initialize the forward-only policy cell without information loss"
            )
        if (
            disc_config.vocab_size != config.vocab_size
            or disc_config.feature_dim != config.feature_dim
            or disc_config.embed_dim != config.embed_dim
            or disc_config.hidden_dim != config.hidden_dim
        ):
            raise CheckpointError(
                f"transfer init: checkpoint dims {disc_config} do not match agent config {config}"
            )
        require_shapes(discriminator_checkpoint, ckpt, param_shapes(disc_config))
        for name in ("embed", "path.proj.w", "path.proj.b"):
            arrays[name] = ckpt[name].copy()
        for direction in ("fwd", "bwd"):
            for key in ("wx", "wh", "b"):
                arrays[f"instr.{direction}.{key}"] = ckpt[f"instr.{direction}.{key}"].copy()
        for key in ("wx", "wh", "b"):
            arrays[f"policy.{key}"] = ckpt[f"path.fwd.{key}"].copy()
    params = {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}
    return FollowerAgent(config, params)


def load_agent(path: str, expect_vocab_hash: str | None = None) -> FollowerAgent:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "agent":
        raise CheckpointError(f"{path}: checkpoint kind {meta.get('kind')!r} is not an agent")
    dims = meta.get("dims", {})
    config = AgentConfig(
        vocab_size=int(dims["vocab_size"]),
        feature_dim=int(dims["feature_dim"]),
        embed_dim=int(dims["embed_dim"]),
        hidden_dim=int(dims["hidden_dim"]),
        vocab_hash=meta.get("vocab_hash", ""),
    )
    if expect_vocab_hash is not None and config.vocab_hash != expect_vocab_hash:
        raise CheckpointError(f"{path}: agent vocabulary hash does not match the dataset vocabulary")
    require_shapes(path, arrays, agent_param_shapes(config))
    return FollowerAgent(config, {n: Tensor(v, requires_grad=True) for n, v in arrays.items()})


def candidate_actions(env: EnvironmentGraph, node: str) -> tuple[list[str], np.ndarray]:
    """Sorted neighbor candidates plus STOP last; STOP has the zero feature."""
    neighbors = list(env.neighbors(node))
    width = env.feature_dim + 4
    feats = np.zeros((len(neighbors) + 1, width))
    for i, nb in enumerate(neighbors):
        feats[i, : env.feature_dim] = env.feature(nb)
        feats[i, env.feature_dim :] = heading_features(env.position(nb) - env.position(node))
    return neighbors + [STOP], feats


def teacher_action(env: EnvironmentGraph, node: str, goal: str, candidates: list[str]) -> int:
    """Index of the shortest-path action toward the goal; STOP at the goal."""
    if node == goal:
        return len(candidates) - 1
    hop = env.shortest_path(node, goal).nodes[1]
    return candidates.index(hop)


@dataclass
class PolicyState:
    node: str
    h: Tensor
    c: Tensor
    prev_feature: np.ndarray
    steps: int = 0


class PolicyRunner:
    """One episode's policy unrolling over a fixed instruction encoding."""

    def __init__(self, agent: FollowerAgent, env: EnvironmentGraph, token_ids, start: str):
        self.agent = agent
        self.env = env
        self.hx = agent.encode_instruction(token_ids)
        p = agent.config.policy_dim
        self.state = PolicyState(
            node=start,
            h=Tensor(np.zeros((1, p))),
            c=Tensor(np.zeros((1, p))),
            prev_feature=np.zeros(agent.config.feature_dim),
        )

    def step_logits(self) -> tuple[list[str], Tensor]:
        params = self.agent.params
        x = ad.add(
            ad.matmul(Tensor(self.state.prev_feature.reshape(1, -1)), params["path.proj.w"]),
            params["path.proj.b"],
        )
        h, c = ad.lstm_step(x, self.state.h, self.state.c, params["policy.wx"], params["policy.wh"], params["policy.b"])
        self.state.h, self.state.c = h, c
        attention = ad.softmax_rows(ad.transpose(ad.matmul(self.hx, ad.transpose(h))))
        context = ad.matmul(attention, self.hx)
        query = ad.add(ad.matmul(ad.concat_cols(h, context), params["head.w"]), params["head.b"])
        candidates, feats = candidate_actions(self.env, self.state.node)
        self._last_feats = feats
        cand_emb = ad.add(
            ad.matmul(Tensor(feats), params["path.proj.w"]),
            ad.repeat_rows(params["path.proj.b"], feats.shape[0]),
        )
        logits = ad.flatten(ad.matmul(cand_emb, ad.transpose(query)))
        return candidates, logits

    def advance(self, candidates: list[str], choice: int) -> bool:
        """Apply the chosen action; returns False when the episode ends (STOP)."""
        self.state.steps += 1
        if candidates[choice] == STOP:
            return False
        self.state.prev_feature = self._last_feats[choice]
        self.state.node = candidates[choice]
        return True


def policy_distribution(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max()
    e = np.exp(z)
    return e / e.sum()


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random()))


@dataclass(frozen=True)
class AgentEpisode:
    pair_id: str
    env_id: str
    token_ids: np.ndarray
    ref_nodes: tuple[str, ...]

    @property
    def start(self) -> str:
        return self.ref_nodes[0]

    @property
    def goal(self) -> str:
        return self.ref_nodes[-1]


def episodes_from_pairs(pairs) -> list[AgentEpisode]:
    out = []
    for pair in pairs:
        out.append(
            AgentEpisode(
                pair_id=pair.pair_id,
                env_id=pair.env_id,
                token_ids=np.asarray(pair.instruction.token_ids, dtype=np.int64),
                ref_nodes=tuple(pair.nodes),
            )
        )
    return out


def episode_loss(
    agent: FollowerAgent,
    env: EnvironmentGraph,
    episode: AgentEpisode,
    horizon: int,
    rng: np.random.Generator,
) -> Tensor:
    """Student forcing: sample the rollout, supervise with shortest-path actions."""
    runner = PolicyRunner(agent, env, episode.token_ids, episode.start)
    terms = []
    while runner.state.steps < horizon:
        candidates, logits = runner.step_logits()
        target = teacher_action(env, runner.state.node, episode.goal, candidates)
        terms.append(ad.sub(ad.logsumexp(logits), ad.pick(logits, target)))
        choice = _sample_index(policy_distribution(logits), rng)
        if not runner.advance(candidates, choice):
            break
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total * (1.0 / len(terms))


def greedy_rollout(agent: FollowerAgent, env: EnvironmentGraph, episode: AgentEpisode, horizon: int) -> Path:
    with ad.no_grad():
        runner = PolicyRunner(agent, env, episode.token_ids, episode.start)
        visited = [episode.start]
        while runner.state.steps < horizon:
            candidates, logits = runner.step_logits()
            choice = int(np.argmax(logits.data))
            if not runner.advance(candidates, choice):
                break
            visited.append(runner.state.node)
    return env.make_path(visited)


def scripted_rollout(env: EnvironmentGraph, start: str, horizon: int, select) -> Path:
    """Model-free rollout for oracles and baselines; select(node, candidates) -> index."""
    node = start
    visited = [start]
    for _ in range(horizon):
        candidates, _ = candidate_actions(env, node)
        choice = select(node, candidates)
        if candidates[choice] == STOP:
            break
        node = candidates[choice]
        visited.append(node)
    return env.make_path(visited)


@dataclass(frozen=True)
class AgentTrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    horizon: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.horizon < 1:
            raise InputError("agent config: epochs >= 0, batch_size >= 1, horizon >= 1")
        if self.learning_rate < 0 or not (0 <= self.momentum < 1) or self.clip_norm <= 0:
            raise InputError("agent config: need lr >= 0, momentum in [0, 1), clip_norm > 0")


def train_student_forcing(
    agent: FollowerAgent,
    envs: dict[str, EnvironmentGraph],
    episodes: list[AgentEpisode],
    config: AgentTrainConfig,
    log=None,
) -> list[dict]:
    """Seeded mini-batch student forcing; returns per-epoch telemetry rows."""
    from .training import MomentumSgd

    config.validate()
    if not episodes:
        raise InputError("train_student_forcing: no episodes")
    for ep in episodes:
        env = envs[ep.env_id]
        if not env.has_node(ep.goal):
            raise InputError(f"episode {ep.pair_id!r}: goal missing from environment")
    optimizer = MomentumSgd(agent.params, config.learning_rate, config.momentum, config.clip_norm)
    shuffle_rng = rng_for(config.seed, "agent-shuffle")
    action_rng = rng_for(config.seed, "agent-actions")
    rows = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(episodes))
        epoch_losses = []
        started = time.perf_counter()
        for lo in range(0, order.size, config.batch_size):
            batch = [episodes[i] for i in order[lo : lo + config.batch_size]]
            ad.zero_grads(list(agent.params.values()))
            total = None
            for ep in batch:
                term = episode_loss(agent, envs[ep.env_id], ep, config.horizon, action_rng)
                total = term if total is None else ad.add(total, term)
            loss = total * (1.0 / len(batch))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite agent loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_losses.append((value, len(batch)))
        weight = sum(w for _, w in epoch_losses)
        row = {
            "epoch": epoch,
            "loss": sum(v * w for v, w in epoch_losses) / weight,
            "seconds": time.perf_counter() - started,
        }
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def evaluate_agent(
    agent: FollowerAgent,
    envs: dict[str, EnvironmentGraph],
    pairs_by_split: dict[str, list[InstructionPathPair]],
    horizon: int = 10,
    d_th: float = 3.0,
) -> dict[str, dict[str, float]]:
    """Greedy decoding per episode; mean PL/NE/SR/SPL per split."""
    results = {}
    for split in sorted(pairs_by_split):
        rows = []
        for episode in episodes_from_pairs(pairs_by_split[split]):
            env = envs[episode.env_id]
            predicted = greedy_rollout(agent, env, episode, horizon)
            rows.append(nav_metrics(env, env.make_path(episode.ref_nodes), predicted, d_th=d_th))
        results[split] = aggregate_metrics(rows)
    return results


AGENT_REPORT_COLUMNS = ("split", "PL", "NE", "SR", "SPL")


def agent_metrics_csv(results: dict[str, dict[str, float]]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=AGENT_REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for split in sorted(results):
        row = {"split": split}
        row.update({k: repr(v) for k, v in results[split].items()})
        writer.writerow(row)
    return buf.getvalue()
