"""Datasets: the tab-separated label/text format, tokenization, vocabularies,
8:2 splits, batching and the synthetic paired-task generator.

File format (UTF-8, one example per line)::

    label-field<TAB>text

Multilabel label fields are comma-separated label names (empty for no
labels); multiclass fields hold exactly one name.  Lines starting with ``#``
and blank lines are skipped.
"""

from __future__ import annotations

import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .numerics import InputError, make_rng

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

Label = Union[int, tuple[int, ...]]


class ParseError(ValueError):
    """A dataset line could not be parsed; carries the 1-based line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


@dataclass(frozen=True)
class LabelSchema:
    kind: str  # "multilabel" | "multiclass"
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("multilabel", "multiclass"):
            raise InputError(f"unknown label kind {self.kind!r}")
        if not self.labels:
            raise InputError("a schema needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise InputError(f"duplicate label names in {self.labels}")

    @property
    def count(self) -> int:
        return len(self.labels)

    def index(self, name: str) -> int:
        try:
            return self._lookup[name.strip().lower()]
        except KeyError:
            raise KeyError(name) from None

    @property
    def _lookup(self) -> dict[str, int]:
        return {n.lower(): i for i, n in enumerate(self.labels)}

    def check(self, label: Label) -> None:
        if self.kind == "multilabel":
            if len(label) != self.count or any(b not in (0, 1) for b in label):
                raise InputError(f"bad multilabel vector {label!r} for {self.count} labels")
        elif not (isinstance(label, (int, np.integer)) and 0 <= label < self.count):
            raise InputError(f"class index {label!r} out of range for {self.count} classes")

    def format(self, label: Label) -> str:
        if self.kind == "multilabel":
            return ",".join(n for n, b in zip(self.labels, label) if b)
        return self.labels[label]


PERSONALITY = LabelSchema("multilabel", ("openness", "conscientiousness", "extraversion",
                                         "agreeableness", "neuroticism"))
ISEAR = LabelSchema("multiclass", ("anger", "disgust", "fear", "joy", "sadness", "shame", "guilt"))
TEC = LabelSchema("multiclass", ("joy", "anger", "disgust", "surprise", "fear", "sadness"))

SCHEMAS = {"personality": PERSONALITY, "isear": ISEAR, "tec": TEC}


def schema_from_spec(spec: str, kind: str = "multiclass") -> LabelSchema:
    """A preset name (``isear``, ``tec``, ``personality``) or a comma list of labels."""
    if spec.lower() in SCHEMAS:
        return SCHEMAS[spec.lower()]
    return LabelSchema(kind, tuple(s.strip() for s in spec.split(",") if s.strip()))


# ---------------------------------------------------------------------------
# reading and writing


def load_delimited(path, schema: LabelSchema) -> list[tuple[str, Label]]:
    """Parse ``label<TAB>text`` lines into ``(text, label)`` pairs."""
    path = Path(path)
    out: list[tuple[str, Label]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ParseError(path, lineno, "missing TAB between label field and text")
            field_, text = line.split("\t", 1)
            if not text.strip():
                raise ParseError(path, lineno, "empty text")
            out.append((text, _parse_label(path, lineno, field_, schema)))
    return out


def _parse_label(path, lineno: int, field_: str, schema: LabelSchema) -> Label:
    names = [n for n in (s.strip() for s in field_.split(",")) if n]
    if schema.kind == "multiclass" and len(names) != 1:
        raise ParseError(path, lineno, f"expected exactly one label, got {field_!r}")
    idx = []
    for n in names:
        try:
            idx.append(schema.index(n))
        except KeyError:
            raise ParseError(path, lineno, f"unknown label {n!r} (schema: {', '.join(schema.labels)})") from None
    if schema.kind == "multiclass":
        return idx[0]
    bits = [0] * schema.count
    for i in idx:
        bits[i] = 1
    return tuple(bits)


def write_delimited(path, items: Sequence[tuple[str, Label]], schema: LabelSchema) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for text, label in items:
            if "\t" in text or "\n" in text:
                raise InputError(f"text may not contain TAB or newline: {text!r}")
            fh.write(f"{schema.format(label)}\t{text}\n")


# ---------------------------------------------------------------------------
# tokens and vocabulary


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation from each token."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if start < end:
            tokens.append(raw[start:end])
    return tokens


class Vocabulary:
    """Token/id bijection with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    @classmethod
    def build(cls, token_lists: Sequence[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        """Most frequent first, ties broken alphabetically."""
        counts = Counter(t for toks in token_lists for t in toks)
        ordered = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(ordered)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if list(itos[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise InputError("vocabulary list must start with <pad>, <unk>")
        return cls(itos[2:])


@dataclass
class Example:
    tokens: list[int]
    text: str
    label: Label


def encode_examples(pairs: Sequence[tuple[str, Label]], vocab: Vocabulary) -> list[Example]:
    return [Example(vocab.encode(tokenize(text)), text, label) for text, label in pairs]


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitDataset:
    train: list
    test: list
    seed: int


def split_8_2(examples: Sequence, seed: int) -> SplitDataset:
    """Seeded shuffle; the first ``floor(0.8 n)`` go to train."""
    n = len(examples)
    if n < 5:
        raise InputError(f"need at least 5 examples to split, got {n}")
    order = make_rng(seed, "split").permutation(n)
    cut = math.floor(0.8 * n)
    return SplitDataset([examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]], seed)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray  # (B, n) int64, padded with PAD_ID
    labels: np.ndarray  # (B, C) multilabel bits or (B,) class ids
    index: np.ndarray   # positions in the source example list

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(examples: Sequence[Example], index: Sequence[int], min_len: int = 1) -> Batch:
    """Pad to the longest sequence, and to at least ``min_len`` tokens."""
    n = max(min_len, max((len(e.tokens) for e in examples), default=0))
    tokens = np.full((len(examples), n), PAD_ID, dtype=np.int64)
    for row, e in enumerate(examples):
        tokens[row, :len(e.tokens)] = e.tokens
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return Batch(tokens, labels, np.asarray(index, dtype=np.int64))


def pad_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad two token matrices to a common width."""
    n = max(a.shape[1], b.shape[1])

    def grow(t):
        if t.shape[1] == n:
            return t
        out = np.full((t.shape[0], n), PAD_ID, dtype=t.dtype)
        out[:, :t.shape[1]] = t
        return out

    return grow(a), grow(b)


class Batcher:
    """Seeded mini-batches over one task's examples.

    ``epoch()`` walks a fresh permutation each call.  The permutation depends
    only on the seed and the dataset size, so two equally sized tasks batched
    with the same seed visit their examples in the same order.  ``stream()`` chains
    epochs forever, which is how a shorter task is cycled against a longer
    one.  ``sample_k`` draws ``k`` batches for pseudo k-shot training; the
    batches are drawn independently (with replacement across batches) from a
    separate random stream, so they never disturb the epoch order.
    """

    def __init__(self, examples: Sequence[Example], batch_size: int, seed: int,
                 drop_last: bool = False, min_len: int = 1, name: str = "task"):
        if batch_size < 1:
            raise InputError(f"batch size must be >= 1, got {batch_size}")
        if not examples:
            raise InputError(f"{name}: no examples to batch")
        self.examples = list(examples)
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.min_len = min_len
        self.name = name
        self._order_rng = make_rng(seed, "batches")
        self._sample_rng = make_rng(seed, "k-shot")

    def __len__(self) -> int:
        n, b = len(self.examples), self.batch_size
        return n // b if self.drop_last else -(-n // b)

    def _make(self, idx: np.ndarray) -> Batch:
        return collate([self.examples[i] for i in idx], idx, self.min_len)

    def epoch(self) -> Iterator[Batch]:
        order = self._order_rng.permutation(len(self.examples))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.drop_last and len(idx) < self.batch_size:
                break
            yield self._make(idx)

    def stream(self) -> Iterator[Batch]:
        while True:
            yield from self.epoch()

    def sample_k(self, k: int) -> list[Batch]:
        size = min(self.batch_size, len(self.examples))
        return [self._make(self._sample_rng.choice(len(self.examples), size=size, replace=False))
                for _ in range(k)]


# ---------------------------------------------------------------------------
# synthetic paired corpora

COUPLED_TRAIT = PERSONALITY.labels.index("neuroticism")
SYNTH_EMOTION = TEC
# affect = 1 selects a negative emotion, 0 a positive one
_NEGATIVE = tuple(TEC.index(n) for n in ("anger", "disgust", "fear", "sadness"))
_POSITIVE = tuple(TEC.index(n) for n in ("joy", "surprise"))


@dataclass
class SyntheticPair:
    personality: list[tuple[str, Label]]
    emotion: list[tuple[str, Label]]
    affect_p: np.ndarray   # latent affect behind each personality example
    affect_e: np.ndarray   # latent affect behind each emotion example (same as affect_p)
    coupled: np.ndarray    # 1 where the coupled trait bit was copied from affect
    meta: dict = field(default_factory=dict)


def synth_paired_tasks(n: int, vocab_size: int = 500, rho: float = 0.8, seed: int = 0,
                       signal: float = 0.3, min_len: int = 8, max_len: int = 24) -> SyntheticPair:
    """Generate index-aligned personality-style and emotion-style corpora.

    Pair ``i`` shares one latent binary affect ``a``.  The emotion class is
    drawn from the negative group when ``a = 1`` and the positive group
    otherwise.  With probability ``rho`` the neuroticism bit of personality
    example ``i`` is set to ``a``; otherwise it is an independent fair coin.
    The other four trait bits are independent fair coins.

    Texts are bags of words ``w<k>`` drawn from label-conditional
    distributions: each token is, with probability ``signal``, taken from the
    word pool of one of the example's labels (a set trait, or the emotion
    class); otherwise, and always for a personality example with no trait
    set, it is a background word.  Affect reaches the text only through the
    labels it drives.
    """
    if not (0.0 <= rho <= 1.0) or math.isnan(rho):
        raise InputError(f"rho must lie in [0, 1], got {rho}")
    if n < 1:
        raise InputError(f"n must be positive, got {n}")
    pool = max(1, vocab_size // 50)
    n_pools = PERSONALITY.count + SYNTH_EMOTION.count
    if vocab_size < pool * n_pools + 1:
        raise InputError(f"vocab size {vocab_size} too small; need at least {n_pools + 1}")
    rng = make_rng(seed, "synth")
    words = [f"w{i}" for i in range(vocab_size)]
    perm = rng.permutation(vocab_size)
    pools = [perm[i * pool:(i + 1) * pool] for i in range(n_pools)]
    trait_pool = pools[:PERSONALITY.count]
    class_pool = pools[PERSONALITY.count:]
    background = perm[n_pools * pool:]

    affect = rng.integers(0, 2, size=n)
    traits = rng.integers(0, 2, size=(n, PERSONALITY.count))
    coupled = (rng.random(n) < rho).astype(np.int64)
    traits[:, COUPLED_TRAIT] = np.where(coupled == 1, affect, traits[:, COUPLED_TRAIT])
    groups = (_POSITIVE, _NEGATIVE)
    classes = np.array([groups[a][rng.integers(len(groups[a]))] for a in affect])

    def text(sources: list[np.ndarray]) -> str:
        length = int(rng.integers(min_len, max_len + 1))
        out = []
        for _ in range(length):
            if sources and rng.random() < signal:
                src = sources[int(rng.integers(len(sources)))]
                out.append(words[src[int(rng.integers(len(src)))]])
            else:
                out.append(words[background[int(rng.integers(len(background)))]])
        return " ".join(out)

    personality, emotion = [], []
    for i in range(n):
        active = [trait_pool[t] for t in range(PERSONALITY.count) if traits[i, t]]
        personality.append((text(active), tuple(int(b) for b in traits[i])))
        emotion.append((text([class_pool[classes[i]]]), int(classes[i])))

    meta = {"n": n, "vocab_size": vocab_size, "rho": rho, "seed": seed, "signal": signal,
            "min_len": min_len, "max_len": max_len, "coupled_trait": PERSONALITY.labels[COUPLED_TRAIT],
            "personality_labels": list(PERSONALITY.labels), "emotion_labels": list(SYNTH_EMOTION.labels)}
    return SyntheticPair(personality, emotion, affect.copy(), affect.copy(), coupled, meta)


def write_synthetic(pair: SyntheticPair, out_dir) -> dict[str, Path]:
    """Write ``personality.tsv``, ``emotion.tsv`` and the ``synth.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"personality": out / "personality.tsv", "emotion": out / "emotion.tsv",
             "meta": out / "synth.json"}
    write_delimited(paths["personality"], pair.personality, PERSONALITY)
    write_delimited(paths["emotion"], pair.emotion, SYNTH_EMOTION)
    paths["meta"].write_text(json.dumps(pair.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# the two-task bundle used by training and analysis


@dataclass
class PairedData:
    p: SplitDataset             # personality Examples
    e: SplitDataset             # emotion Examples
    vocab_p: Vocabulary
    vocab_e: Vocabulary
    schema_p: LabelSchema
    schema_e: LabelSchema


def prepare_tasks(pairs_p: Sequence[tuple[str, Label]], pairs_e: Sequence[tuple[str, Label]],
                  schema_e: LabelSchema, seed: int, schema_p: LabelSchema = PERSONALITY) -> PairedData:
    """Split each task 8:2 and encode it with a vocabulary built from its train split only."""
    for schema, pairs in ((schema_p, pairs_p), (schema_e, pairs_e)):
        for _, label in pairs:
            schema.check(label)
    sp, se = split_8_2(list(pairs_p), seed), split_8_2(list(pairs_e), seed)
    vp = Vocabulary.build([tokenize(t) for t, _ in sp.train])
    ve = Vocabulary.build([tokenize(t) for t, _ in se.train])
    return PairedData(
        SplitDataset(encode_examples(sp.train, vp), encode_examples(sp.test, vp), seed),
        SplitDataset(encode_examples(se.train, ve), encode_examples(se.test, ve), seed),
        vp, ve, schema_p, schema_e)
