"""Joint training: plain Adam and the pseudo k-shot meta-trainer.

Adam training draws one batch per task per step, adds the two losses and
takes one Adam step.  The meta-trainer walks the emotion batches; for each it
samples ``k`` personality batches and runs ``k`` plain SGD steps on the joint
loss (``theta <- theta - r * grad``), collecting the gradients.  Their mean
is then applied to the pre-inner-loop parameters with one Adam step (the
first-order approximation), and the inner adaptations are discarded.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import Batch, Batcher, Example, PairedData, collate, pad_pair
from .model import ModelConfig, TowerState, bind, init_params, mtl_forward
from .numerics import InputError
from .objectives import (EvalReport, JointLossValue, accuracy_multiclass, cross_entropy, decode_argmax,
                         decode_multilabel, joint_loss, metrics_multilabel, multilabel_soft_margin)

OPTIMIZERS = ("adam", "maml")


class NumericError(RuntimeError):
    """A loss or parameter became NaN or infinite."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    inner_lr: float | None = None  # None: same as lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 3
    epochs: int = 10
    batch_p: int = 32
    batch_e: int = 32
    seed: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise InputError(f"learning rate must be > 0, got {self.lr}")
        if self.inner_lr is not None and self.inner_lr < 0:
            raise InputError(f"inner learning rate must be >= 0, got {self.inner_lr}")
        if self.k < 1:
            raise InputError(f"k must be >= 1, got {self.k}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_p < 1 or self.batch_e < 1:
            raise InputError("epochs must be >= 0 and batch sizes >= 1")

    @property
    def inner_rate(self) -> float:
        return self.lr if self.inner_lr is None else self.inner_lr

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if k not in params or params[k].shape != np.shape(g):
            raise InputError(f"gradient {k!r} does not match any parameter of that shape")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# losses and gradients


def batch_loss(nodes, batch_p: Batch, batch_e: Batch, config: ModelConfig) -> JointLossValue:
    sp, se = mtl_forward(nodes, batch_p.tokens, batch_e.tokens, config)
    lp = multilabel_soft_margin(sp.logits, batch_p.labels[:sp.logits.shape[0]])
    le = cross_entropy(se.logits, batch_e.labels[:se.logits.shape[0]])
    return joint_loss(lp, le)


def loss_and_grads(params: dict[str, np.ndarray], batch_p: Batch, batch_e: Batch,
                   config: ModelConfig) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
    nodes = bind(params)
    loss = batch_loss(nodes, batch_p, batch_e, config)
    nx.backward(loss.total)
    values = loss.floats()
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite loss {values}")
    return values, {k: n.grad for k, n in nodes.items()}


def single_loss_and_grads(params: dict[str, np.ndarray], batch: Batch, config: ModelConfig,
                          task: str) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for one tower trained alone (``params`` hold only that tower)."""
    from .model import tower_forward

    nodes = bind(params)
    state = tower_forward(nodes, batch.tokens, config, task)
    loss = (multilabel_soft_margin(state.logits, batch.labels) if task == "p"
            else cross_entropy(state.logits, batch.labels))
    nx.backward(loss)
    return float(loss.value), {k: n.grad for k, n in nodes.items()}


def _check_finite(params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"parameter {k!r} became non-finite")


def joint_adam_step(params, state: AdamState, batch_p: Batch, batch_e: Batch,
                    config: ModelConfig, train: TrainConfig) -> tuple[float, float, float]:
    losses, grads = loss_and_grads(params, batch_p, batch_e, config)
    adam_step(params, grads, state, train.lr, train.beta1, train.beta2, train.eps)
    _check_finite(params)
    return losses


def maml_step(params, state: AdamState, batch_e: Batch, p_batches: Sequence[Batch],
              config: ModelConfig, train: TrainConfig) -> tuple[float, float, float]:
    """Inner SGD over ``p_batches``, then one Adam step on the starting point."""
    theta = {k: v.copy() for k, v in params.items()}
    total = None
    losses = []
    r = train.inner_rate
    for batch_p in p_batches:
        values, grads = loss_and_grads(theta, batch_p, batch_e, config)
        losses.append(values)
        if total is None:
            total = {k: g.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                total[k] += g
        theta = {k: theta[k] - r * grads[k] for k in theta}
    meta = {k: g / len(p_batches) for k, g in total.items()}
    adam_step(params, meta, state, train.lr, train.beta1, train.beta2, train.eps)
    _check_finite(params)
    return tuple(float(np.mean([l[i] for l in losses])) for i in range(3))


# ---------------------------------------------------------------------------
# evaluation


def paired_indices(n_p: int, n_e: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded alignment of two test sets; the shorter one is cycled.

    Both sides use the same permutation stream, so equally sized test sets
    are paired index for index.
    """
    order_p = nx.make_rng(seed, "eval-pairing").permutation(n_p)
    order_e = nx.make_rng(seed, "eval-pairing").permutation(n_e)
    n = max(n_p, n_e)
    j = np.arange(n)
    return order_p[j % n_p], order_e[j % n_e]


def paired_forward(params, config: ModelConfig, test_p: Sequence[Example], test_e: Sequence[Example],
                   seed: int, batch_size: int = 256, common_length: bool | None = None
                   ) -> Iterable[tuple[np.ndarray, np.ndarray, TowerState, TowerState]]:
    """Forward every aligned test pair in chunks.

    Yields ``(idx_p, idx_e, state_p, state_e)``.  Token matrices of a pair
    are padded to a common length when the model is gated (or when
    ``common_length`` forces it), otherwise each side keeps its own padding.
    """
    if not test_p or not test_e:
        raise InputError("both test sets must be non-empty")
    ip, ie = paired_indices(len(test_p), len(test_e), seed)
    common = bool(config.gated_levels) if common_length is None else common_length
    for start in range(0, len(ip), batch_size):
        bp, be = ip[start:start + batch_size], ie[start:start + batch_size]
        tp = collate([test_p[i] for i in bp], bp, config.min_len).tokens
        te = collate([test_e[i] for i in be], be, config.min_len).tokens
        if common:
            tp, te = pad_pair(tp, te)
        sp, se = mtl_forward(params, tp, te, config)
        yield bp, be, sp, se


def evaluate(params, config: ModelConfig, test_p: Sequence[Example], test_e: Sequence[Example],
             seed: int = 0, batch_size: int = 256) -> EvalReport:
    """Decode both towers over the aligned test pairing and score each task."""
    logits_p = np.zeros((len(test_p), config.n_traits))
    logits_e = np.zeros((len(test_e), config.n_emotions))
    seen_p = np.zeros(len(test_p), dtype=bool)
    seen_e = np.zeros(len(test_e), dtype=bool)
    for bp, be, sp, se in paired_forward(params, config, test_p, test_e, seed, batch_size):
        for idx, seen, out, state in ((bp, seen_p, logits_p, sp), (be, seen_e, logits_e, se)):
            fresh = ~seen[idx]
            out[idx[fresh]] = state.logits.value[fresh]
            seen[idx[fresh]] = True
    gold_p = np.array([e.label for e in test_p], dtype=np.int64)
    gold_e = np.array([e.label for e in test_e], dtype=np.int64)
    return EvalReport(metrics_multilabel(decode_multilabel(logits_p), gold_p),
                      accuracy_multiclass(decode_argmax(logits_e), gold_e))


# ---------------------------------------------------------------------------
# run bookkeeping


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_p: float
    loss_e: float
    eval: EvalReport | None
    seconds: float


@dataclass
class RunReport:
    model_config: ModelConfig
    train_config: TrainConfig
    epochs: list[EpochRecord] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    checkpoint: str | None = None

    @property
    def seed(self) -> int:
        return self.train_config.seed

    @property
    def final(self) -> EvalReport:
        return self.epochs[-1].eval

    CSV_HEAD = ["epoch", "loss_total", "loss_p", "loss_e"]

    def to_csv(self) -> str:
        """One row per epoch.  Wall-clock time is kept out so reruns are byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEAD + EvalReport.csv_header())
        for r in self.epochs:
            evals = r.eval.csv_row() if r.eval else [""] * len(EvalReport.csv_header())
            w.writerow([r.epoch, repr(r.loss_total), repr(r.loss_p), repr(r.loss_e)] + evals)
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in self.epochs:
            w.writerow([r.epoch, f"{r.seconds:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        """``key = value`` lines describing the run and its final metrics."""
        lines = [f"seed = {self.seed}", f"optimizer = {self.train_config.optimizer}",
                 f"gate = {self.model_config.gate.value}",
                 f"placement = {','.join(self.model_config.placement)}",
                 f"epochs = {len(self.epochs)}"]
        if self.checkpoint:
            lines.append(f"checkpoint = {self.checkpoint}")
        if self.epochs:
            last = self.epochs[-1]
            lines += [f"final_loss_total = {last.loss_total!r}", f"final_loss_p = {last.loss_p!r}",
                      f"final_loss_e = {last.loss_e!r}"]
            if last.eval:
                lines.append(last.eval.to_kv().rstrip("\n"))
        return "\n".join(lines) + "\n"


class JointTrainer:
    """Holds parameters, optimizer state and batch streams for one run.

    ``run_epoch`` advances one epoch; the timing probe interleaves epochs of
    several trainers through it.
    """

    def __init__(self, config: ModelConfig, data: PairedData, train: TrainConfig,
                 params: dict[str, np.ndarray] | None = None, evaluate_each_epoch: bool = True):
        if not data.p.train or not data.e.train:
            raise InputError("both tasks need training examples")
        self.config = config
        self.data = data
        self.train = train
        self.params = init_params(config, train.seed) if params is None else params
        self.state = AdamState.zeros(self.params)
        self.evaluate_each_epoch = evaluate_each_epoch
        self.p_batches = Batcher(data.p.train, train.batch_p, train.seed, min_len=config.min_len, name="p")
        self.e_batches = Batcher(data.e.train, train.batch_e, train.seed, min_len=config.min_len, name="e")
        self._p_stream = self.p_batches.stream()
        self._e_stream = self.e_batches.stream()
        self.report = RunReport(config, train, params=self.params)

    def _adam_epoch(self) -> list[tuple[float, float, float]]:
        steps = max(len(self.p_batches), len(self.e_batches))
        return [joint_adam_step(self.params, self.state, next(self._p_stream), next(self._e_stream),
                                self.config, self.train) for _ in range(steps)]

    def _maml_epoch(self) -> list[tuple[float, float, float]]:
        return [maml_step(self.params, self.state, be, self.p_batches.sample_k(self.train.k),
                          self.config, self.train) for be in self.e_batches.epoch()]

    def run_epoch(self) -> EpochRecord:
        start = time.perf_counter()
        losses = self._maml_epoch() if self.train.optimizer == "maml" else self._adam_epoch()
        seconds = time.perf_counter() - start
        mean = np.mean(np.array(losses), axis=0)
        report = None
        if self.evaluate_each_epoch and self.data.p.test and self.data.e.test:
            report = evaluate(self.params, self.config, self.data.p.test, self.data.e.test,
                              self.train.seed, self.train.eval_batch)
        rec = EpochRecord(len(self.report.epochs) + 1, float(mean[0]), float(mean[1]), float(mean[2]),
                          report, seconds)
        self.report.epochs.append(rec)
        return rec

    def run(self) -> RunReport:
        for _ in range(self.train.epochs):
            self.run_epoch()
        return self.report


def train_adam_joint(config: ModelConfig, data: PairedData, train: TrainConfig,
                     params: dict[str, np.ndarray] | None = None) -> RunReport:
    if train.optimizer != "adam":
        raise InputError("train_adam_joint needs optimizer='adam'")
    return JointTrainer(config, data, train, params).run()


def train_maml_like(config: ModelConfig, data: PairedData, train: TrainConfig,
                    params: dict[str, np.ndarray] | None = None) -> RunReport:
    if train.optimizer != "maml":
        raise InputError("train_maml_like needs optimizer='maml'")
    return JointTrainer(config, data, train, params).run()


def train(config: ModelConfig, data: PairedData, train_cfg: TrainConfig,
          params: dict[str, np.ndarray] | None = None) -> RunReport:
    return JointTrainer(config, data, train_cfg, params).run()


def train_adam_single(config: ModelConfig, examples: Sequence[Example], task: str, train: TrainConfig,
                      params: dict[str, np.ndarray] | None = None) -> tuple[dict[str, np.ndarray], list[float]]:
    """Train one tower on its own task with the same init and batch streams as the joint run.

    Returns the tower's parameters and the per-step losses.  An epoch is the
    task's own batch count, which matches the joint run whenever both tasks
    have equally many batches.
    """
    if task not in ("p", "e"):
        raise InputError(f"task must be 'p' or 'e', got {task!r}")
    if params is None:
        params = {k: v for k, v in init_params(config, train.seed).items() if k.startswith(f"{task}.")}
    state = AdamState.zeros(params)
    size = train.batch_p if task == "p" else train.batch_e
    batches = Batcher(examples, size, train.seed, min_len=config.min_len, name=task)
    stream = batches.stream()
    losses = []
    for _ in range(train.epochs * len(batches)):
        loss, grads = single_loss_and_grads(params, next(stream), config, task)
        adam_step(params, grads, state, train.lr, train.beta1, train.beta2, train.eps)
        losses.append(loss)
    return params, losses
