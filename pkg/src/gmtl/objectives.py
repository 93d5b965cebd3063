"""Losses, label decoding and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import InputError, Node


def multilabel_soft_margin(logits, targets) -> Node:
    """Mean over labels (and over the batch) of the two-sided logistic loss.

    ``-(1/C) sum_i [y_i log sigmoid(x_i) + (1 - y_i) log(exp(-x_i) / (1 + exp(-x_i)))]``
    where the second log equals ``log sigmoid(-x_i)``.
    """
    logits = nx._wrap(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise InputError(f"targets shape {y.shape} does not match logits {logits.shape}")
    if y.size == 0:
        raise InputError("need at least one label")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("multilabel targets must be 0/1")
    pos = nx.mul(nx.log_sigmoid(logits), y)
    neg = nx.mul(nx.log_sigmoid(nx.mul(logits, -1.0)), 1.0 - y)
    return nx.mul(nx.mean_all(nx.add(pos, neg)), -1.0)


def cross_entropy(logits, target) -> Node:
    """``-log softmax(logits)[target]``, averaged over the batch.

    ``logits`` is ``(m,)`` with an integer target or ``(B, m)`` with ``B`` targets.
    """
    logits = nx._wrap(logits)
    t = np.asarray(target, dtype=np.int64)
    if logits.value.ndim == 1:
        logits = nx.reshape(logits, (1, logits.shape[0]))
        t = t.reshape(1)
    m = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise InputError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if np.any(t < 0) or np.any(t >= m):
        raise InputError(f"class index out of range for {m} classes")
    nll = nx.sub(nx.logsumexp(logits, axis=-1), nx.take_last(logits, t))
    return nx.mean_all(nll)


@dataclass
class JointLossValue:
    total: Node
    personality: Node
    emotion: Node

    def floats(self) -> tuple[float, float, float]:
        return float(self.total.value), float(self.personality.value), float(self.emotion.value)


def joint_loss(personality, emotion) -> JointLossValue:
    p, e = nx._wrap(personality), nx._wrap(emotion)
    return JointLossValue(nx.add(p, e), p, e)


# ---------------------------------------------------------------------------
# decoding


def decode_multilabel(logits, threshold: float = 0.5) -> np.ndarray:
    """Bit ``i`` is set iff ``sigmoid(logit_i) > threshold``."""
    z = np.asarray(logits, dtype=np.float64)
    if threshold == 0.5:
        return (z > 0).astype(np.int64)
    return (nx._sigmoid(z) > threshold).astype(np.int64)


def decode_argmax(logits) -> np.ndarray | int:
    """First index holding the maximum (per row for 2-D input)."""
    z = np.asarray(logits)
    out = np.argmax(z, axis=-1)
    return int(out) if z.ndim == 1 else out


# ---------------------------------------------------------------------------
# metrics


def _ratio(num: float, den: float, flag: str, flags: set[str]) -> float:
    if den == 0:
        flags.add(flag)
        return 0.0
    return num / den


def _f1(p: float, r: float, flag: str, flags: set[str]) -> float:
    return _ratio(2 * p * r, p + r, flag, flags)


@dataclass
class MultilabelMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    macro_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    subset_accuracy: float
    counts: np.ndarray  # (C, 4): TP, FP, FN, TN per label
    flags: set[str] = field(default_factory=set)

    @property
    def average(self) -> float:
        """Mean of micro accuracy, precision, recall and F1."""
        return (self.accuracy + self.precision + self.recall + self.f1) / 4.0

    FIELDS = ("accuracy", "precision", "recall", "f1", "average", "macro_accuracy",
              "macro_precision", "macro_recall", "macro_f1", "subset_accuracy")

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.FIELDS}


def metrics_multilabel(preds, golds) -> MultilabelMetrics:
    """Micro (pooled over every example-label cell) and macro (per label) scores."""
    p = np.asarray(preds, dtype=np.int64)
    g = np.asarray(golds, dtype=np.int64)
    if p.shape != g.shape or p.ndim != 2:
        raise InputError(f"preds {p.shape} and golds {g.shape} must be equal-shaped (N, C) arrays")
    if p.shape[0] == 0:
        raise InputError("no examples to score")
    tp = ((p == 1) & (g == 1)).sum(axis=0)
    fp = ((p == 1) & (g == 0)).sum(axis=0)
    fn = ((p == 0) & (g == 1)).sum(axis=0)
    tn = ((p == 0) & (g == 0)).sum(axis=0)
    flags: set[str] = set()
    TP, FP, FN, TN = (int(x.sum()) for x in (tp, fp, fn, tn))
    precision = _ratio(TP, TP + FP, "precision_undefined", flags)
    recall = _ratio(TP, TP + FN, "recall_undefined", flags)
    f1 = _f1(precision, recall, "f1_undefined", flags)
    accuracy = (TP + TN) / p.size
    per = []
    macro_flags: set[str] = set()
    for c in range(p.shape[1]):
        pc = _ratio(tp[c], tp[c] + fp[c], "macro_precision_undefined", macro_flags)
        rc = _ratio(tp[c], tp[c] + fn[c], "macro_recall_undefined", macro_flags)
        per.append((pc, rc, _f1(pc, rc, "macro_f1_undefined", macro_flags), (tp[c] + tn[c]) / p.shape[0]))
    per_arr = np.array(per, dtype=np.float64)
    return MultilabelMetrics(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        macro_accuracy=float(per_arr[:, 3].mean()), macro_precision=float(per_arr[:, 0].mean()),
        macro_recall=float(per_arr[:, 1].mean()), macro_f1=float(per_arr[:, 2].mean()),
        subset_accuracy=float(np.all(p == g, axis=1).mean()),
        counts=np.stack([tp, fp, fn, tn], axis=1), flags=flags | macro_flags)


def accuracy_multiclass(preds, golds) -> float:
    p, g = np.asarray(preds), np.asarray(golds)
    if p.shape != g.shape:
        raise InputError(f"preds {p.shape} and golds {g.shape} differ in length")
    if p.size == 0:
        raise InputError("no examples to score")
    return float((p == g).mean())


@dataclass
class EvalReport:
    """Metrics for both tasks of one evaluation pass."""

    personality: MultilabelMetrics
    emotion_accuracy: float

    def values(self) -> dict[str, float]:
        out = {f"p_{k}": v for k, v in self.personality.values().items()}
        out["e_accuracy"] = self.emotion_accuracy
        return out

    def to_kv(self) -> str:
        """Flat ``key = value`` text, one metric per line."""
        lines = [f"{k} = {v!r}" for k, v in self.values().items()]
        lines.append(f"p_flags = {','.join(sorted(self.personality.flags))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header() -> list[str]:
        return [f"p_{k}" for k in MultilabelMetrics.FIELDS] + ["e_accuracy"]

    def csv_row(self) -> list[str]:
        return [repr(v) for v in self.values().values()]
