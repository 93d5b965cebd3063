"""Twin-tower text CNN with information-sharing gates between the towers.

Each task owns a tower: embedding -> convolution (one filter bank per width)
-> global max pooling -> dense hidden layer -> output head.  A gate may sit
after the convolution, pooling and dense levels.  Every gate is an additive
residual update applied in both directions::

    h_p = c_p + g(c_e)        h_e = c_e + g(c_p)

so shapes are preserved and both towers read the other one's activations.
Conv-level gates pair the feature maps of equal filter width.

Parameters live in a flat ``dict[str, np.ndarray]`` keyed ``p.*`` / ``e.*``
for the personality and emotion towers and ``gate.*`` for the bilinear
attention matrices.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import pad_pair
from .numerics import InputError, Node

LEVELS = ("conv", "pool", "dense")
TASKS = ("p", "e")


class GateKind(str, Enum):
    SIG = "sig"
    CAG = "cag"
    SILG = "silg"
    SOG = "sog"
    NONE = "none"

    @classmethod
    def parse(cls, name: "str | GateKind") -> "GateKind":
        if isinstance(name, GateKind):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise InputError(f"unknown gate {name!r}; choose from {[g.value for g in cls]}") from None


@dataclass
class ModelConfig:
    vocab_p: int
    vocab_e: int
    n_traits: int = 5
    n_emotions: int = 7
    embed_dim: int = 300
    widths: tuple[int, ...] = (3, 4, 5)
    filters: int = 32
    hidden: int = 64
    gate: GateKind = GateKind.NONE
    placement: tuple[str, ...] = LEVELS
    activation: str = "relu"
    cag_cross_value: bool = False

    def __post_init__(self):
        self.gate = GateKind.parse(self.gate)
        self.widths = tuple(int(w) for w in self.widths)
        bad = set(self.placement) - set(LEVELS)
        if bad:
            raise InputError(f"unknown placement levels {sorted(bad)}")
        self.placement = tuple(p for p in LEVELS if p in set(self.placement))
        if self.embed_dim < 1 or self.filters < 1 or self.hidden < 1:
            raise InputError("embed_dim, filters and hidden must be >= 1")
        if not self.widths or min(self.widths) < 1:
            raise InputError(f"filter widths must be positive, got {self.widths}")
        if self.gate is not GateKind.NONE and not self.placement:
            raise InputError("a gated model needs at least one placement level")
        if self.activation not in nx.ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.vocab_p < 2 or self.vocab_e < 2:
            raise InputError("vocabularies must hold at least <pad> and <unk>")

    @property
    def gated_levels(self) -> tuple[str, ...]:
        return () if self.gate is GateKind.NONE else self.placement

    @property
    def min_len(self) -> int:
        return max(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gate"] = self.gate.value
        d["widths"] = list(self.widths)
        d["placement"] = list(self.placement)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TowerState:
    conv_maps: list[Node]
    conv_hidden: list[Node]
    pooled: Node
    pooled_hidden: Node
    dense: Node
    dense_hidden: Node
    logits: Node
    argmax: list[np.ndarray] = field(default_factory=list)

    def conv_vector(self) -> np.ndarray:
        """Post-gate conv maps flattened per example, shape ``(B, sum L_h * F)``."""
        return np.concatenate([h.value.reshape(h.shape[0], -1) for h in self.conv_hidden], axis=1)


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded initialization.

    Each tower draws from its own stream, so a tower's initial weights do not
    depend on the gate or on the other tower.  Embedding rows are uniform in
    +-1 (a one-hot input has fan-in 1); conv and dense weights are uniform in
    +-1/sqrt(fan-in); biases are zero; attention matrices start at 0.1 * I.
    """
    params: dict[str, np.ndarray] = {}
    d, f, hdim = config.embed_dim, config.filters, config.hidden
    pooled = f * len(config.widths)
    for task, vocab, n_out in (("p", config.vocab_p, config.n_traits),
                               ("e", config.vocab_e, config.n_emotions)):
        rng = nx.make_rng(seed, "init", task)
        params[f"{task}.embed"] = rng.uniform(-1.0, 1.0, size=(vocab, d))
        for h in config.widths:
            bound = 1.0 / np.sqrt(h * d)
            params[f"{task}.conv{h}.w"] = rng.uniform(-bound, bound, size=(f, h, d))
            params[f"{task}.conv{h}.b"] = np.zeros(f)
        params[f"{task}.dense.w"] = rng.uniform(-1 / np.sqrt(pooled), 1 / np.sqrt(pooled), size=(pooled, hdim))
        params[f"{task}.dense.b"] = np.zeros(hdim)
        params[f"{task}.out.w"] = rng.uniform(-1 / np.sqrt(hdim), 1 / np.sqrt(hdim), size=(hdim, n_out))
        params[f"{task}.out.b"] = np.zeros(n_out)
    if config.gate is GateKind.CAG:
        for level in config.placement:
            size = f if level == "conv" else 1
            for direction in ("p2e", "e2p"):
                params[f"gate.{level}.{direction}"] = 0.1 * np.eye(size)
    return params


def bind(params: dict[str, np.ndarray]) -> dict[str, Node]:
    """Fresh leaf nodes for one forward/backward pass."""
    return {k: nx.leaf(v) for k, v in params.items()}


def _nodes(params) -> dict[str, Node]:
    if params and isinstance(next(iter(params.values())), Node):
        return params
    return {k: nx.const(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# gates


def _attend(src: Node, dst: Node, wc, values: Node) -> Node:
    # m[i, j] = src_i W dst_j over channel vectors; rows normalized by softmax
    scores = nx.matmul(nx.matmul(src, wc), nx.swapaxes(dst, -1, -2))
    return nx.matmul(nx.softmax(scores, axis=-1), values)


def gate_apply(kind, c_t1, c_t2, level_params: dict | None = None, level: str = "dense",
               cross_value: bool = False) -> tuple[Node, Node]:
    """Exchange information between two same-shaped activations.

    ``level == "conv"`` expects ``(..., L, F)`` feature maps: SoG normalizes
    over positions ``L`` and CAG attends between positions using F-channel
    vectors.  Other levels expect ``(..., f)`` feature vectors: SoG normalizes
    over features and CAG treats each feature as a position with a single
    channel.  ``level_params`` holds the CAG matrices under ``"p2e"`` (used
    for ``h_t2``) and ``"e2p"`` (used for ``h_t1``).
    """
    kind = GateKind.parse(kind)
    c1, c2 = nx._wrap(c_t1), nx._wrap(c_t2)
    if c1.shape != c2.shape:
        raise InputError(f"gate operands differ in shape: {c1.shape} vs {c2.shape}")
    if kind is GateKind.NONE:
        raise InputError("gate_apply needs a gate kind other than none")
    conv = level == "conv"
    if kind is GateKind.SIG:
        return c1 + nx.sigmoid(c2), c2 + nx.sigmoid(c1)
    if kind is GateKind.SILG:
        return c1 + nx.sigmoid(c2) * c2, c2 + nx.sigmoid(c1) * c1
    if kind is GateKind.SOG:
        axis = -2 if conv else -1
        return c1 + nx.softmax(c2, axis=axis) * c2, c2 + nx.softmax(c1, axis=axis) * c1
    # CAG
    if level_params is None:
        width = c1.shape[-1] if conv else 1
        level_params = {"p2e": 0.1 * np.eye(width), "e2p": 0.1 * np.eye(width)}
    w12, w21 = level_params["p2e"], level_params["e2p"]
    if conv:
        a1, a2 = c1, c2
    else:
        a1 = nx.reshape(c1, c1.shape + (1,))
        a2 = nx.reshape(c2, c2.shape + (1,))
    h2 = _attend(a1, a2, w12, a1 if cross_value else a2)
    h1 = _attend(a2, a1, w21, a2 if cross_value else a1)
    if not conv:
        h1, h2 = nx.reshape(h1, c1.shape), nx.reshape(h2, c2.shape)
    return c1 + h1, c2 + h2


# ---------------------------------------------------------------------------
# forward passes


def _conv_maps(nodes, task: str, tokens: np.ndarray, config: ModelConfig) -> list[Node]:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be a (batch, length) matrix, got shape {tokens.shape}")
    if tokens.shape[1] < config.min_len:
        raise InputError(f"sequence length {tokens.shape[1]} shorter than widest filter {config.min_len}")
    emb = nx.gather_rows(nodes[f"{task}.embed"], tokens)
    return [nx.conv1d_valid(emb, nodes[f"{task}.conv{h}.w"], nodes[f"{task}.conv{h}.b"], config.activation)
            for h in config.widths]


def _pool(maps: list[Node]) -> tuple[Node, list[np.ndarray]]:
    pooled, idx = zip(*(nx.max_pool(m, axis=1) for m in maps))
    return nx.concat(list(pooled), axis=-1), list(idx)


def _dense(nodes, task: str, x: Node, config: ModelConfig) -> Node:
    return nx.activate(nx.dense(x, nodes[f"{task}.dense.w"], nodes[f"{task}.dense.b"]), config.activation)


def _head(nodes, task: str, z: Node) -> Node:
    return nx.dense(z, nodes[f"{task}.out.w"], nodes[f"{task}.out.b"])


def tower_forward(params, tokens: np.ndarray, config: ModelConfig, task: str = "p") -> TowerState:
    """One tower with no gates."""
    if task not in TASKS:
        raise InputError(f"task must be 'p' or 'e', got {task!r}")
    nodes = _nodes(params)
    maps = _conv_maps(nodes, task, tokens, config)
    pooled, idx = _pool(maps)
    z = _dense(nodes, task, pooled, config)
    return TowerState(maps, maps, pooled, pooled, z, z, _head(nodes, task, z), idx)


def pair_tokens(tokens_p: np.ndarray, tokens_e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Truncate two batches to the shorter one and pad them to a common length."""
    b = min(len(tokens_p), len(tokens_e))
    return pad_pair(np.asarray(tokens_p)[:b], np.asarray(tokens_e)[:b])


def mtl_forward(params, tokens_p: np.ndarray, tokens_e: np.ndarray,
                config: ModelConfig) -> tuple[TowerState, TowerState]:
    """Run both towers level by level, gating after every placed level.

    With a gate the two batches are paired first (see :func:`pair_tokens`);
    without one the towers are independent and the batches are used as given.
    """
    if len(tokens_p) == 0 or len(tokens_e) == 0:
        raise InputError("both batches must be non-empty")
    nodes = _nodes(params)
    levels = config.gated_levels
    if levels:
        tokens_p, tokens_e = pair_tokens(tokens_p, tokens_e)

    def gate(level, a, b):
        if level not in levels:
            return a, b
        lp = None
        if config.gate is GateKind.CAG:
            lp = {"p2e": nodes[f"gate.{level}.p2e"], "e2p": nodes[f"gate.{level}.e2p"]}
        return gate_apply(config.gate, a, b, lp, level, config.cag_cross_value)

    maps_p = _conv_maps(nodes, "p", tokens_p, config)
    maps_e = _conv_maps(nodes, "e", tokens_e, config)
    hid_p, hid_e = [], []
    for mp, me in zip(maps_p, maps_e):
        hp, he = gate("conv", mp, me)
        hid_p.append(hp)
        hid_e.append(he)
    pool_p, idx_p = _pool(hid_p)
    pool_e, idx_e = _pool(hid_e)
    gp_p, gp_e = gate("pool", pool_p, pool_e)
    z_p, z_e = _dense(nodes, "p", gp_p, config), _dense(nodes, "e", gp_e, config)
    gz_p, gz_e = gate("dense", z_p, z_e)
    state_p = TowerState(maps_p, hid_p, pool_p, gp_p, z_p, gz_p, _head(nodes, "p", gz_p), idx_p)
    state_e = TowerState(maps_e, hid_e, pool_e, gp_e, z_e, gz_e, _head(nodes, "e", gz_e), idx_e)
    return state_p, state_e


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive written by numpy.savez with entries
#   meta          UTF-8 JSON bytes (uint8 array): format tag, model config,
#                 both vocabularies, label names, free-form extras
#   param/<name>  one float64 array per parameter


CHECKPOINT_FORMAT = "gmtl-checkpoint-1"


class CheckpointError(Exception):
    """A checkpoint file is missing, corrupt, or not a checkpoint."""


def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": config.to_dict(), "extra": extra or {}}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = {"meta": blob}
    arrays.update({f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unrecognized checkpoint format {meta.get('format')!r}")
            params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        config = ModelConfig.from_dict(meta["config"])
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError, zipfile.BadZipFile, EOFError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    expected = init_params(config, 0)
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter set does not match the stored config")
    return config, params, meta.get("extra", {})
