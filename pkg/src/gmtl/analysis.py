"""Probes and experiment grids: cross-task cosine similarity, per-gate epoch
timing, gate x optimizer comparison tables and the single-level placement
ablation."""

from __future__ import annotations

import csv
import io
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Example, PairedData
from .model import LEVELS, GateKind, ModelConfig
from .numerics import InputError
from .objectives import EvalReport, MultilabelMetrics
from .trainer import JointTrainer, TrainConfig, paired_forward, train

PROBE_METHOD = "per-example cosine, then mean over test pairs"


def desk_config(data: PairedData, gate="none", **overrides) -> ModelConfig:
    """Small model used for laptop-scale experiments and the acceptance suite."""
    base = dict(vocab_p=len(data.vocab_p), vocab_e=len(data.vocab_e), n_traits=data.schema_p.count,
                n_emotions=data.schema_e.count, embed_dim=32, widths=(3, 4, 5), filters=16, hidden=32,
                gate=gate)
    base.update(overrides)
    return ModelConfig(**base)


def model_name(gate: GateKind | str, optimizer: str) -> str:
    gate = GateKind.parse(gate)
    stem = "CNN Single" if gate is GateKind.NONE else {
        GateKind.SIG: "SiGMTL", GateKind.CAG: "CAGMTL", GateKind.SILG: "SiLGMTL", GateKind.SOG: "SoGMTL"}[gate]
    return f"{stem}+maml" if optimizer == "maml" else stem


# ---------------------------------------------------------------------------
# cosine probe


@dataclass
class ProbeReport:
    sim1: float
    sim2: float
    pairs: int
    skipped_conv: int
    skipped_dense: int
    config: dict = field(default_factory=dict)
    method: str = PROBE_METHOD

    def to_kv(self) -> str:
        rows = [("sim1", repr(self.sim1)), ("sim2", repr(self.sim2)), ("pairs", self.pairs),
                ("skipped_conv", self.skipped_conv), ("skipped_dense", self.skipped_dense),
                ("method", self.method)]
        rows += [(f"config.{k}", v) for k, v in sorted(self.config.items())]
        return "".join(f"{k} = {v}\n" for k, v in rows)


@dataclass
class Activations:
    """Post-gate hidden vectors of every aligned test pair, one row per pair."""

    conv_p: list[np.ndarray]
    conv_e: list[np.ndarray]
    dense_p: np.ndarray
    dense_e: np.ndarray


def dump_activations(params, config: ModelConfig, test_p: Sequence[Example], test_e: Sequence[Example],
                     seed: int = 0, batch_size: int = 256) -> Activations:
    conv_p, conv_e, dense_p, dense_e = [], [], [], []
    for _, _, sp, se in paired_forward(params, config, test_p, test_e, seed, batch_size, common_length=True):
        conv_p.extend(sp.conv_vector())
        conv_e.extend(se.conv_vector())
        dense_p.append(sp.dense_hidden.value)
        dense_e.append(se.dense_hidden.value)
    return Activations(conv_p, conv_e, np.concatenate(dense_p), np.concatenate(dense_e))


def _mean_cosine(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> tuple[float, int]:
    sims, skipped = [], 0
    for x, y in zip(a, b):
        nx_, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx_ == 0 or ny == 0:
            skipped += 1
            continue
        sims.append(float(np.clip(x @ y / (nx_ * ny), -1.0, 1.0)))
    if not sims:
        return float("nan"), skipped
    return float(np.mean(sims)), skipped


def cosine_probe(params, config: ModelConfig, test_p: Sequence[Example], test_e: Sequence[Example],
                 seed: int = 0, batch_size: int = 256) -> ProbeReport:
    """Mean cosine similarity between the towers' post-gate conv (Sim1) and dense (Sim2) vectors.

    Zero-norm vectors are skipped and counted.  Parameters are only read.
    """
    acts = dump_activations(params, config, test_p, test_e, seed, batch_size)
    sim1, skip1 = _mean_cosine(acts.conv_p, acts.conv_e)
    sim2, skip2 = _mean_cosine(acts.dense_p, acts.dense_e)
    n = len(acts.conv_p)
    if skip1 == n or skip2 == n:
        raise InputError("no test pair has non-zero activations at both levels")
    echo = {"gate": config.gate.value, "placement": ",".join(config.placement), "seed": seed}
    return ProbeReport(sim1, sim2, n, skip1, skip2, echo)


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingReport:
    seconds: dict[str, list[float]]
    hardware: str

    def mean(self, gate: str) -> float:
        return float(np.mean(self.seconds[gate]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gate", "epochs", "mean_seconds", "min_seconds", "max_seconds"])
        for g, s in self.seconds.items():
            w.writerow([g, len(s), f"{np.mean(s):.6f}", f"{min(s):.6f}", f"{max(s):.6f}"])
        return buf.getvalue()

    def to_kv(self) -> str:
        lines = [f"{g} = {self.mean(g):.6f}" for g in self.seconds]
        lines.append(f"hardware = {self.hardware}")
        return "\n".join(lines) + "\n"


def hardware_note() -> str:
    return f"{platform.machine()} {platform.system()} python {platform.python_version()} numpy {np.__version__} cpus {os.cpu_count()}"


def time_gates(data: PairedData, gates: Sequence[str], epochs: int, train_cfg: TrainConfig,
               base: ModelConfig | None = None) -> TimingReport:
    """Wall-clock training seconds per epoch for each gate on identical data and seed.

    Epochs of the different variants are interleaved round-robin so slow drift
    in machine load hits every variant alike.  Evaluation is not timed.
    """
    if epochs < 1:
        raise InputError("need at least one timed epoch")
    base = base or desk_config(data)
    trainers = {g: JointTrainer(replace(base, gate=GateKind.parse(g)), data, train_cfg,
                                evaluate_each_epoch=False) for g in gates}
    seconds: dict[str, list[float]] = {g: [] for g in gates}
    for _ in range(epochs):
        for g, t in trainers.items():
            seconds[g].append(t.run_epoch().seconds)
    return TimingReport(seconds, hardware_note())


# ---------------------------------------------------------------------------
# comparison grid


@dataclass
class CellResult:
    gate: str
    optimizer: str
    placement: tuple[str, ...]
    seeds: list[int]
    reports: list[EvalReport]
    probes: list[ProbeReport] = field(default_factory=list)

    @property
    def name(self) -> str:
        return model_name(self.gate, self.optimizer)

    def metric(self, key: str) -> np.ndarray:
        return np.array([r.values()[key] for r in self.reports])

    def mean_std(self, key: str) -> tuple[float, float]:
        v = self.metric(key)
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


METRIC_KEYS = tuple(f"p_{k}" for k in MultilabelMetrics.FIELDS) + ("e_accuracy",)


def _run_one(args):
    model_cfg, data, train_cfg, probe = args
    report = train(model_cfg, data, train_cfg)
    pr = None
    if probe:
        pr = cosine_probe(report.params, model_cfg, data.p.test, data.e.test, train_cfg.seed)
    return report.final, pr


def _map(jobs: int, fn, items: list):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def default_jobs() -> int:
    return max(1, int(os.environ.get("GMTL_JOBS", "1")))


def comparison_grid(cells: Sequence[tuple[str, str]], data: PairedData, seeds: Sequence[int],
                    train_cfg: TrainConfig, base: ModelConfig | None = None, jobs: int = 1,
                    probe: bool = False) -> list[CellResult]:
    """Train every ``(gate, optimizer)`` cell once per seed and collect final test metrics."""
    if not seeds:
        raise InputError("need at least one seed")
    base = base or desk_config(data)
    tasks = []
    for gate, opt in cells:
        for s in seeds:
            tasks.append((replace(base, gate=GateKind.parse(gate)), data,
                          replace(train_cfg, optimizer=opt, seed=int(s)), probe))
    results = _map(jobs, _run_one, tasks)
    out, i = [], 0
    for gate, opt in cells:
        chunk = results[i:i + len(seeds)]
        i += len(seeds)
        out.append(CellResult(GateKind.parse(gate).value, opt, base.placement, list(seeds),
                              [r for r, _ in chunk], [p for _, p in chunk if p is not None]))
    return out


def grid_csv(cells: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["model", "gate", "optimizer", "placement", "seeds"]
    for k in METRIC_KEYS:
        head += [f"{k}_mean", f"{k}_std"]
    w.writerow(head)
    for c in cells:
        row = [c.name, c.gate, c.optimizer, ",".join(c.placement), len(c.seeds)]
        for k in METRIC_KEYS:
            m, s = c.mean_std(k)
            row += [repr(m), repr(s)]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# placement ablation


@dataclass
class AblationRow:
    variant: str               # "conv" | "pool" | "dense" | "all"
    placement: tuple[str, ...]
    cell: CellResult
    sim1: float
    sim2: float
    sim1_delta: float = 0.0
    sim2_delta: float = 0.0


def placement_ablation(data: PairedData, seeds: Sequence[int], train_cfg: TrainConfig,
                       base: ModelConfig | None = None, jobs: int = 1) -> list[AblationRow]:
    """SoG at a single level versus SoG at all levels, with Sim1/Sim2 deltas against the latter."""
    base = replace(base or desk_config(data), gate=GateKind.SOG)
    variants = [("dense", ("dense",)), ("pool", ("pool",)), ("conv", ("conv",)), ("all", LEVELS)]
    rows = []
    for name, placement in variants:
        cell = comparison_grid([("sog", train_cfg.optimizer)], data, seeds, train_cfg,
                               replace(base, placement=placement), jobs, probe=True)[0]
        rows.append(AblationRow(name, placement, cell,
                                float(np.mean([p.sim1 for p in cell.probes])),
                                float(np.mean([p.sim2 for p in cell.probes]))))
    ref = rows[-1]
    for r in rows:
        r.sim1_delta = r.sim1 - ref.sim1
        r.sim2_delta = r.sim2 - ref.sim2
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    """Metrics per single-level variant (mean over seeds)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "placement"] + [f"{k}_mean" for k in METRIC_KEYS])
    for r in rows:
        w.writerow([r.variant, ",".join(r.placement)] + [repr(r.cell.mean_std(k)[0]) for k in METRIC_KEYS])
    return buf.getvalue()


def similarity_csv(rows: Sequence[AblationRow]) -> str:
    """Sim1/Sim2 per variant with deltas against the all-levels model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "sim1", "sim1_delta", "sim2", "sim2_delta"])
    for r in rows:
        w.writerow([r.variant, repr(r.sim1), repr(r.sim1_delta), repr(r.sim2), repr(r.sim2_delta)])
    return buf.getvalue()
