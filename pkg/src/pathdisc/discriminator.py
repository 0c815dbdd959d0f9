"""Two-tower encoders and the alignment-based pair score.

One tower embeds and encodes the instruction tokens, the other projects and
encodes the perceptual sequence; both emit per-step latent states of equal
width. Their pairwise dot products form the alignment matrix. Each row is
pooled by a softmax-weighted sum over its own entries, and the row scores are
pooled by a softmin-weighted sum, so the scalar score reflects the weakest
aligned instruction part: a best worst-case sequence alignment. The reported
probability is the logistic squashing of that raw score.

The instruction tower is always bidirectional. The path tower is bidirectional
by default; the unidirectional variant doubles its hidden size so both towers
keep equal output widths, and is the only variant whose states transfer into
the (forward-only) navigation agent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .common import CheckpointError, ShapeError, rng_for
from .pairs import ORIENTATION_DIM

BIDIRECTIONAL = "bidirectional"
UNIDIRECTIONAL = "unidirectional"
INIT_SCALE = 0.1


@dataclass(frozen=True)
class DiscConfig:
    vocab_size: int
    feature_dim: int  # percept width D + 4
    embed_dim: int = 16
    hidden_dim: int = 32
    path_tower_mode: str = BIDIRECTIONAL
    vocab_hash: str = ""

    def __post_init__(self):
        if self.path_tower_mode not in (BIDIRECTIONAL, UNIDIRECTIONAL):
            raise ShapeError(f"unknown path tower mode {self.path_tower_mode!r}")
        if min(self.vocab_size, self.feature_dim, self.embed_dim, self.hidden_dim) < 1:
            raise ShapeError("all discriminator dimensions must be >= 1")

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    @property
    def path_hidden_dim(self) -> int:
        # Unidirectional doubles the cell so tower output widths match.
        return self.hidden_dim if self.path_tower_mode == BIDIRECTIONAL else 2 * self.hidden_dim


def init_cell(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> dict[str, np.ndarray]:
    """Uniform(-0.1, 0.1) weights; forget-gate bias +1 (gate order i, f, g, o)."""
    b = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(1, 4 * hidden_dim))
    b[0, hidden_dim : 2 * hidden_dim] += 1.0
    return {
        "wx": rng.uniform(-INIT_SCALE, INIT_SCALE, size=(input_dim, 4 * hidden_dim)),
        "wh": rng.uniform(-INIT_SCALE, INIT_SCALE, size=(hidden_dim, 4 * hidden_dim)),
        "b": b,
    }


def param_shapes(config: DiscConfig) -> dict[str, tuple[int, ...]]:
    e, h, hp = config.embed_dim, config.hidden_dim, config.path_hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, e)}
    for direction in ("fwd", "bwd"):
        shapes[f"instr.{direction}.wx"] = (e, 4 * h)
        shapes[f"instr.{direction}.wh"] = (h, 4 * h)
        shapes[f"instr.{direction}.b"] = (1, 4 * h)
    shapes["path.proj.w"] = (config.feature_dim, e)
    shapes["path.proj.b"] = (1, e)
    directions = ("fwd", "bwd") if config.path_tower_mode == BIDIRECTIONAL else ("fwd",)
    for direction in directions:
        shapes[f"path.{direction}.wx"] = (e, 4 * hp)
        shapes[f"path.{direction}.wh"] = (hp, 4 * hp)
        shapes[f"path.{direction}.b"] = (1, 4 * hp)
    return shapes


def init_params(config: DiscConfig, seed: int) -> dict[str, Tensor]:
    params: dict[str, np.ndarray] = {}
    rng = rng_for(seed, "disc", "embed")
    params["embed"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.vocab_size, config.embed_dim))
    for direction in ("fwd", "bwd"):
        cell = init_cell(rng_for(seed, "disc", "instr", direction), config.embed_dim, config.hidden_dim)
        for key, value in cell.items():
            params[f"instr.{direction}.{key}"] = value
    rng = rng_for(seed, "disc", "proj")
    params["path.proj.w"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(config.feature_dim, config.embed_dim))
    params["path.proj.b"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(1, config.embed_dim))
    directions = ("fwd", "bwd") if config.path_tower_mode == BIDIRECTIONAL else ("fwd",)
    for direction in directions:
        cell = init_cell(rng_for(seed, "disc", "path", direction), config.embed_dim, config.path_hidden_dim)
        for key, value in cell.items():
            params[f"path.{direction}.{key}"] = value
    return {name: Tensor(value, requires_grad=True) for name, value in params.items()}


def encode_sequence(params: dict[str, Tensor], tower: str, inputs: Tensor, bidirectional: bool) -> Tensor:
    """Latent matrix H, one row per input row; rows concatenate both directions."""
    forward = ad.lstm_sequence(
        inputs, params[f"{tower}.fwd.wx"], params[f"{tower}.fwd.wh"], params[f"{tower}.fwd.b"]
    )
    if not bidirectional:
        return forward
    backward = ad.reverse_rows(
        ad.lstm_sequence(
            ad.reverse_rows(inputs),
            params[f"{tower}.bwd.wx"],
            params[f"{tower}.bwd.wh"],
            params[f"{tower}.bwd.b"],
        )
    )
    return ad.concat_cols(forward, backward)


@dataclass(frozen=True)
class AlignmentOutcome:
    matrix: np.ndarray  # [n, m]
    row_scores: np.ndarray  # [n]
    raw_score: float
    probability: float


def alignment_matrix(hx: Tensor, hv: Tensor) -> Tensor:
    if hx.data.shape[1] != hv.data.shape[1]:
        raise ShapeError(
            f"alignment: tower output dims differ, {hx.data.shape[1]} vs {hv.data.shape[1]}; "
            "towers must be configured with equal output dims"
        )
    return ad.matmul(hx, ad.transpose(hv))


def alignment_score(a: Tensor) -> tuple[Tensor, Tensor]:
    """Row scores c (softmax-pooled rows) and the softmin-pooled scalar score."""
    weights = ad.softmax_rows(a)
    c = ad.row_sums(ad.mul(weights, a))
    raw = ad.sum_all(ad.mul(ad.softmin_vec(c), c))
    return c, raw


class Discriminator:
    """Bundles config and parameters; scoring is pure and thread-safe."""

    def __init__(self, config: DiscConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in params:
                raise CheckpointError(f"discriminator params: missing {name!r}")
            if params[name].data.shape != shape:
                raise CheckpointError(
                    f"discriminator params: {name!r} has shape {params[name].data.shape}, expected {shape}"
                )
        surplus = sorted(set(params) - set(expected))
        if surplus:
            raise CheckpointError(f"discriminator params: unexpected arrays {surplus}")
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: DiscConfig, seed: int = 0) -> "Discriminator":
        return cls(config, init_params(config, seed))

    @property
    def trainable(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def encode_instruction(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and ids.max() >= self.config.vocab_size:
            raise ShapeError(
                f"token id {int(ids.max())} out of vocabulary (size {self.config.vocab_size}); "
                "UNK substitution happens at load time"
            )
        emb = ad.take_rows(self.params["embed"], ids)
        return encode_sequence(self.params, "instr", emb, bidirectional=True)

    def encode_path(self, percepts: np.ndarray) -> Tensor:
        percepts = np.asarray(percepts, dtype=np.float64)
        if percepts.ndim != 2 or percepts.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"percepts must be (m, {self.config.feature_dim}), got {percepts.shape}"
            )
        m = percepts.shape[0]
        projected = ad.matmul(Tensor(percepts), self.params["path.proj.w"])
        projected = ad.add(projected, ad.repeat_rows(self.params["path.proj.b"], m))
        bidirectional = self.config.path_tower_mode == BIDIRECTIONAL
        return encode_sequence(self.params, "path", projected, bidirectional)

    def raw_score(self, token_ids, percepts: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(raw score, row scores, alignment matrix) as tape tensors."""
        hx = self.encode_instruction(token_ids)
        hv = self.encode_path(percepts)
        a = alignment_matrix(hx, hv)
        c, raw = alignment_score(a)
        return raw, c, a

    def score_pair(self, token_ids, percepts: np.ndarray) -> AlignmentOutcome:
        with ad.no_grad():
            raw, c, a = self.raw_score(token_ids, percepts)
        raw_value = float(raw.data)
        return AlignmentOutcome(
            matrix=a.data.copy(),
            row_scores=c.data.copy(),
            raw_score=raw_value,
            probability=float(ad._sigmoid(np.asarray([raw_value]))[0]),
        )

    def checkpoint_meta(self) -> dict:
        return {
            "kind": "discriminator",
            "dims": {
                "vocab_size": self.config.vocab_size,
                "feature_dim": self.config.feature_dim,
                "embed_dim": self.config.embed_dim,
                "hidden_dim": self.config.hidden_dim,
            },
            "path_tower_mode": self.config.path_tower_mode,
            "vocab_hash": self.config.vocab_hash,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def save(self, path: str) -> None:
        from .checkpoint import save_checkpoint

        save_checkpoint(path, self.checkpoint_meta(), self.arrays())


def config_from_meta(meta: dict, expect_vocab_hash: str | None = None) -> DiscConfig:
    if meta.get("kind") != "discriminator":
        raise CheckpointError(f"checkpoint kind {meta.get('kind')!r} is not a discriminator")
    dims = meta.get("dims", {})
    config = DiscConfig(
        vocab_size=int(dims["vocab_size"]),
        feature_dim=int(dims["feature_dim"]),
        embed_dim=int(dims["embed_dim"]),
        hidden_dim=int(dims["hidden_dim"]),
        path_tower_mode=meta.get("path_tower_mode", BIDIRECTIONAL),
        vocab_hash=meta.get("vocab_hash", ""),
    )
    if expect_vocab_hash is not None and config.vocab_hash != expect_vocab_hash:
        raise CheckpointError(
            "checkpoint vocabulary hash does not match the dataset vocabulary; "
            "refusing to score with mismatched token ids"
        )
    return config


def load_discriminator(path: str, expect_vocab_hash: str | None = None) -> Discriminator:
    from .checkpoint import load_checkpoint, require_shapes

    meta, arrays = load_checkpoint(path)
    config = config_from_meta(meta, expect_vocab_hash)
    require_shapes(path, arrays, param_shapes(config))
    params = {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}
    return Discriminator(config, params)
