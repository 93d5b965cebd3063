"""Command-line entry point: ``gmtl <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data or checkpoint error,
4 numeric failure (a loss or parameter went NaN/Inf).

Every artifact-producing command writes ``manifest.json`` next to its
outputs.  All randomness derives from ``--seed``; sub-streams are split
with :func:`gmtl.numerics.make_rng` keys (``"split"``, ``"init"``,
``"batches"``, ``"k-shot"``, ``"eval-pairing"``, ``"synth"``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import (ablation_csv, comparison_grid, cosine_probe, default_jobs, grid_csv, placement_ablation,
                       similarity_csv, time_gates)
from .data import (PERSONALITY, ParseError, Vocabulary, encode_examples, load_delimited, prepare_tasks,
                   schema_from_spec, split_8_2, synth_paired_tasks, write_synthetic)
from .model import LEVELS, CheckpointError, GateKind, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import InputError
from .trainer import NumericError, TrainConfig, evaluate, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: list, outputs: list, seed) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "seed": seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"--out: cannot write to {out} ({exc})") from exc
    return out


def _emotion_schema(args):
    if args.e_labels:
        return schema_from_spec(args.e_labels)
    sidecar = Path(args.task_e).with_name("synth.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        return schema_from_spec(",".join(meta["emotion_labels"]))
    return schema_from_spec("isear")


def _load_pair(args, seed: int):
    if not Path(args.task_p).exists():
        raise FileNotFoundError(f"--task-p: no such file {args.task_p}")
    if not Path(args.task_e).exists():
        raise FileNotFoundError(f"--task-e: no such file {args.task_e}")
    schema_e = _emotion_schema(args)
    pairs_p = load_delimited(args.task_p, PERSONALITY)
    pairs_e = load_delimited(args.task_e, schema_e)
    return prepare_tasks(pairs_p, pairs_e, schema_e, seed)


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _placement(text: str) -> tuple[str, ...]:
    levels = _csv_list(text)
    bad = [lv for lv in levels if lv not in LEVELS]
    if bad or not levels:
        raise UsageError(f"--placement: expected a comma list from {','.join(LEVELS)}, got {text!r}")
    return tuple(levels)


def _gate(text: str) -> GateKind:
    try:
        return GateKind.parse(text)
    except InputError as exc:
        raise UsageError(f"--gate: {exc}") from exc


def _model_config(args, data, gate) -> ModelConfig:
    return ModelConfig(vocab_p=len(data.vocab_p), vocab_e=len(data.vocab_e), n_traits=data.schema_p.count,
                       n_emotions=data.schema_e.count, embed_dim=args.embed_dim,
                       widths=tuple(int(w) for w in _csv_list(args.widths)), filters=args.filters,
                       hidden=args.hidden, gate=gate, placement=_placement(args.placement),
                       activation=args.activation, cag_cross_value=args.cag_cross_value)


def _train_config(args, optimizer: str | None = None, seed: int | None = None) -> TrainConfig:
    return TrainConfig(optimizer=optimizer or getattr(args, "opt", "adam"), lr=args.lr, inner_lr=args.inner_lr, k=args.k,
                       epochs=args.epochs, batch_p=args.batch, batch_e=args.batch,
                       seed=args.seed if seed is None else seed)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in _csv_list(text)]
    except ValueError:
        raise UsageError(f"--seeds: expected a comma list of integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if not (0.0 <= args.rho <= 1.0):
        raise UsageError(f"--rho must lie in [0, 1], got {args.rho}")
    if args.n < 1:
        raise UsageError(f"--n must be positive, got {args.n}")
    out = _out_dir(args.out_dir)
    pair = synth_paired_tasks(args.n, args.vocab, args.rho, args.seed, signal=args.signal)
    paths = write_synthetic(pair, out)
    write_manifest(out, "synth", vars_clean(args), [], list(paths.values()), args.seed)
    print(f"wrote {paths['personality']} and {paths['emotion']} ({args.n} lines each)")
    return 0


def cmd_train(args) -> int:
    gate = _gate(args.gate)
    if args.opt == "adam" and args.k_given:
        print("warning: --k is ignored with --opt adam", file=sys.stderr)
    out = _out_dir(args.out)
    data = _load_pair(args, args.seed)
    cfg = _model_config(args, data, gate)
    tc = _train_config(args)
    report = train(cfg, data, tc)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, cfg, report.params, extra={
        "split_seed": args.seed, "vocab_p": data.vocab_p.to_list(), "vocab_e": data.vocab_e.to_list(),
        "labels_p": list(data.schema_p.labels), "labels_e": list(data.schema_e.labels),
        "train": tc.to_dict()})
    report.checkpoint = ckpt.name
    files = {"report.csv": report.to_csv(), "timings.csv": report.timings_csv(), "summary.txt": report.summary()}
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    write_manifest(out, "train", {"model": cfg.to_dict(), "train": tc.to_dict()},
                   [args.task_p, args.task_e], [ckpt] + [out / n for n in files], args.seed)
    print(report.summary(), end="")
    return 0


def _checkpoint_data(args):
    config, params, extra = load_checkpoint(args.checkpoint)
    try:
        vocab_p = Vocabulary.from_list(extra["vocab_p"])
        vocab_e = Vocabulary.from_list(extra["vocab_e"])
        schema_e = schema_from_spec(",".join(extra["labels_e"]))
        split_seed = int(extra["split_seed"])
    except (KeyError, InputError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{args.checkpoint}: checkpoint lacks data metadata ({exc})") from exc
    pairs_p = load_delimited(args.task_p, PERSONALITY)
    pairs_e = load_delimited(args.task_e, schema_e)
    if args.split == "test":
        pairs_p, pairs_e = split_8_2(pairs_p, split_seed).test, split_8_2(pairs_e, split_seed).test
    return config, params, encode_examples(pairs_p, vocab_p), encode_examples(pairs_e, vocab_e), split_seed


def cmd_eval(args) -> int:
    config, params, test_p, test_e, split_seed = _checkpoint_data(args)
    report = evaluate(params, config, test_p, test_e, split_seed)
    text = report.to_kv()
    print(text, end="")
    if args.out:
        out = _out_dir(args.out)
        (out / "metrics.txt").write_text(text, encoding="utf-8")
        row = ",".join(report.csv_header()) + "\n" + ",".join(report.csv_row()) + "\n"
        (out / "metrics.csv").write_text(row, encoding="utf-8")
        write_manifest(out, "eval", {"split": args.split}, [args.checkpoint, args.task_p, args.task_e],
                       [out / "metrics.txt", out / "metrics.csv"], split_seed)
    return 0


def cmd_probe(args) -> int:
    config, params, test_p, test_e, split_seed = _checkpoint_data(args)
    report = cosine_probe(params, config, test_p, test_e, split_seed)
    text = report.to_kv()
    print(text, end="")
    if args.out:
        out = _out_dir(args.out)
        (out / "probe.txt").write_text(text, encoding="utf-8")
        write_manifest(out, "probe", {"split": args.split}, [args.checkpoint, args.task_p, args.task_e],
                       [out / "probe.txt"], split_seed)
    return 0


def cmd_grid(args) -> int:
    out = _out_dir(args.out)
    data = _load_pair(args, args.seed)
    gates = [_gate(g).value for g in _csv_list(args.gates)]
    opts = _csv_list(args.opts)
    if any(o not in ("adam", "maml") for o in opts):
        raise UsageError(f"--opts: expected adam and/or maml, got {args.opts!r}")
    seeds = _seeds(args.seeds)
    base = _model_config(args, data, GateKind.NONE)
    cells = comparison_grid([(g, o) for g in gates for o in opts], data, seeds, _train_config(args),
                            base, jobs=args.jobs)
    text = grid_csv(cells)
    (out / "grid.csv").write_text(text, encoding="utf-8")
    write_manifest(out, "grid", {"gates": gates, "opts": opts, "seeds": seeds, "model": base.to_dict(),
                                 "train": _train_config(args).to_dict()},
                   [args.task_p, args.task_e], [out / "grid.csv"], args.seed)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args.out)
    data = _load_pair(args, args.seed)
    base = _model_config(args, data, GateKind.SOG)
    rows = placement_ablation(data, _seeds(args.seeds), _train_config(args), base, jobs=args.jobs)
    files = {"ablation.csv": ablation_csv(rows), "similarity.csv": similarity_csv(rows)}
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    write_manifest(out, "ablate", {"seeds": _seeds(args.seeds), "model": base.to_dict(),
                                   "train": _train_config(args).to_dict()},
                   [args.task_p, args.task_e], [out / n for n in files], args.seed)
    print(files["similarity.csv"], end="")
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args.out)
    data = _load_pair(args, args.seed)
    gates = [_gate(g).value for g in _csv_list(args.gates)]
    base = _model_config(args, data, GateKind.NONE)
    report = time_gates(data, gates, args.epochs, _train_config(args), base)
    (out / "timing.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "timing.txt").write_text(report.to_kv(), encoding="utf-8")
    write_manifest(out, "bench", {"gates": gates, "model": base.to_dict(), "train": _train_config(args).to_dict()},
                   [args.task_p, args.task_e], [out / "timing.csv", out / "timing.txt"], args.seed)
    print(report.to_csv(), end="")
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "k_given")}


# ---------------------------------------------------------------------------
# parser


class _KAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.k_given = True


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task-p", required=True, help="personality dataset (labels<TAB>text)")
    p.add_argument("--task-e", required=True, help="emotion dataset (label<TAB>text)")
    p.add_argument("--e-labels", default=None,
                   help="emotion label set: isear, tec or a comma list (default: synth.json sidecar, else isear)")


def _model_flags(p: argparse.ArgumentParser, gate_flag: bool = True) -> None:
    if gate_flag:
        p.add_argument("--gate", default="sog", help="sig | cag | silg | sog | none")
    p.add_argument("--placement", default="conv,pool,dense")
    p.add_argument("--embed-dim", type=int, default=300)
    p.add_argument("--widths", default="3,4,5")
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--activation", default="relu", choices=["relu", "tanh", "identity"])
    p.add_argument("--cag-cross-value", action="store_true",
                   help="CAG attends over the other task's values instead of its own")


def _train_flags(p: argparse.ArgumentParser, opt_flag: bool = True) -> None:
    if opt_flag:
        p.add_argument("--opt", default="adam", choices=["adam", "maml"])
    p.add_argument("--k", type=int, default=3, action=_KAction)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--inner-lr", type=float, default=None, help="inner-loop SGD rate (default: --lr)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(k_given=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmtl", description="Gated multitask CNNs for personality and emotion.")
    parser.add_argument("--version", action="version", version=f"gmtl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic correlated task pair")
    p.add_argument("--n", type=int, default=2000, help="examples per task")
    p.add_argument("--vocab", type=int, default=500)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--signal", type=float, default=0.3, help="probability a token comes from a label's word pool")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write checkpoint + report")
    _data_flags(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "score a checkpoint"),
                              ("probe", cmd_probe, "cross-task cosine similarity of a checkpoint")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--task-p", required=True)
        p.add_argument("--task-e", required=True)
        p.add_argument("--split", choices=["test", "all"], default="test",
                       help="re-split the files with the checkpoint's seed and use the test part (default), or use all lines")
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("grid", help="gate x optimizer comparison over several seeds")
    _data_flags(p)
    _model_flags(p, gate_flag=False)
    _train_flags(p, opt_flag=False)
    p.add_argument("--gates", default="none,sig,cag,silg,sog")
    p.add_argument("--opts", default="adam,maml")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="SoG at a single level vs all levels, with Sim1/Sim2 deltas")
    _data_flags(p)
    _model_flags(p, gate_flag=False)
    _train_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="seconds per training epoch for each gate")
    _data_flags(p)
    _model_flags(p, gate_flag=False)
    _train_flags(p)
    p.add_argument("--gates", default="none,sig,cag,silg,sog")
    p.set_defaults(func=cmd_bench, epochs=3)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gmtl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, CheckpointError, FileNotFoundError, InputError, OSError) as exc:
        print(f"gmtl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"gmtl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
