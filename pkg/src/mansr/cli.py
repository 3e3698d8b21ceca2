"""Command line: preprocess | train | train-gate | evaluate | report.

Stages communicate through files in a run directory::

    corpus.jsonl          preprocess
    model.ckpt            train       (recommender, before gate fitting)
    memory.train.ckpt     train       (memory over training pairs + index)
    checkpoint.ckpt       train-gate  (recommender with validation items, gate)
    memory.ckpt           train-gate  (memory including replayed validation events)
    eval-<variant>/       evaluate    (report files, see mansr.reports)
    manifest.<cmd>.json   every command

Flags mirror :class:`RunConfig` fields. ``MANSR_RUN_DIR`` and
``MANSR_CORPUS`` supply default paths.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Sequence

from . import checkpoint as ck
from . import persistence as ps
from .config import ConfigError, RunConfig
from .data import CorpusFormatError, SplitError, iter_lines, read_corpus, write_corpus
from .evaluation import BASELINES, VARIANTS, ComponentMissing, InvariantViolation
from .pipeline import evaluate_stage, gate_stage, preprocess_lines, train_stage
from .reports import export_reports, format_table, write_comparison

log = logging.getLogger("mansr")

# keys fixed at training time; later stages must not silently change them
TRAIN_KEYS = (
    "seed", "preset", "min_item_support", "min_session_length", "max_session_length", "test_days", "valid_fraction",
    "recent_fraction", "embed_dim", "hidden", "init_scale", "dtype", "epochs", "batch_size", "lr", "optimizer",
    "index_kind", "nlist", "m", "bits", "kmeans_iters",
)
GATE_KEYS = ("K", "gate_hidden", "gate_lr", "gate_patience", "gate_max_epochs", "insert_valid", "interleave")


class CommandError(RuntimeError):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def _add_config_flags(p: argparse.ArgumentParser, fixed: Sequence[str] = ()) -> None:
    g = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        if f.name in fixed:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            conv = {"int": int, "float": float, "str": str, "int | None": int}.get(str(f.type), str)
            g.add_argument(flag, dest=f.name, type=conv, default=None, metavar=f.name.upper())
    g.add_argument("--config", type=Path, help="JSON file of RunConfig fields")


def _given(args) -> dict:
    names = {f.name for f in fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _config(args, stored: RunConfig | None = None, locked: Sequence[str] = ()) -> RunConfig:
    base = stored.to_dict() if stored is not None else RunConfig().to_dict()
    if getattr(args, "config", None):
        loaded = RunConfig.load(args.config).to_dict()
        base.update(loaded if stored is None else {k: v for k, v in loaded.items() if k not in locked})
    given = _given(args)
    if stored is not None:
        clash = [k for k in locked if k in given and given[k] != getattr(stored, k)]
        if clash:
            raise CommandError(f"{', '.join(clash)} fixed by an earlier stage; rerun that stage to change them")
    base.update(given)
    try:
        return RunConfig(**base).validate()
    except (ConfigError, TypeError) as exc:
        raise CommandError(f"invalid configuration: {exc}") from exc


def _run_dir(args) -> Path:
    run = args.run_dir or os.environ.get("MANSR_RUN_DIR")
    if not run:
        raise CommandError("no run directory: pass --run-dir or set MANSR_RUN_DIR")
    path = Path(run)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _corpus_path(args) -> Path:
    corpus = args.corpus or os.environ.get("MANSR_CORPUS")
    if not corpus:
        raise CommandError("no corpus: pass --corpus or set MANSR_CORPUS (create one with `mansr preprocess`)")
    path = Path(corpus)
    if not path.exists():
        raise CommandError(f"corpus {path} not found; run `mansr preprocess` first")
    return path


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise CommandError(f"{path} not found; run `mansr {command}` first")
    return path


def _load_split(path: Path):
    try:
        return read_corpus(path)[0]
    except CorpusFormatError as exc:
        raise CommandError(str(exc)) from exc


def _load_ckpt(path: Path):
    try:
        return ck.load_checkpoint(path)
    except ps.CheckpointError as exc:
        raise CommandError(f"cannot load {path}: {exc}") from exc


# commands

def cmd_preprocess(args) -> int:
    cfg = _config(args)
    if args.toy:
        lines = resources.files("mansr").joinpath("data/toy_clicks.csv").read_text().splitlines(keepends=True)
        sources = ["<bundled toy dataset>"]
    else:
        inputs = args.input or ([os.environ["MANSR_DATA"]] if os.environ.get("MANSR_DATA") else [])
        if not inputs:
            raise CommandError("no input: pass --input FILE, --toy, or set MANSR_DATA")
        lines = (line for p in inputs for line in iter_lines(p))
        sources = [str(p) for p in inputs]
    try:
        split, stats = preprocess_lines(lines, cfg, strict=args.strict_input)
    except SplitError as exc:
        raise CommandError(f"cannot split corpus: {exc}") from exc
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, split, meta={"config": cfg.to_dict(), "stats": stats, "sources": sources})
    ck.write_manifest(out.with_name("manifest.preprocess.json"), "preprocess", cfg, [out], sources)
    print(f"wrote {out}: {len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test sessions")
    return 0


def cmd_train(args) -> int:
    corpus = _corpus_path(args)
    run = _run_dir(args)
    try:
        split, header = read_corpus(corpus)
    except CorpusFormatError as exc:
        raise CommandError(str(exc)) from exc
    stored = header.get("meta", {}).get("config")
    cfg = _config(args, RunConfig.from_dict(stored) if stored else None,
                  locked=("preset", "min_item_support", "min_session_length", "max_session_length", "test_days",
                          "valid_fraction", "recent_fraction"))
    art = train_stage(split, cfg)
    model_path, memory_path = run / "model.ckpt", run / "memory.train.ckpt"
    ck.save_checkpoint(model_path, art, cfg, memory_path)
    ck.write_manifest(run / "manifest.train.json", "train", cfg, [model_path, memory_path], [corpus])
    print(f"trained on {len(split.train)} sessions in {art.timings['pretrain_seconds']:.1f}s; memory {len(art.memory)} entries")
    return 0


def cmd_train_gate(args) -> int:
    corpus = _corpus_path(args)
    run = _run_dir(args)
    art, stored = _load_ckpt(_need(run / "model.ckpt", "train"))
    cfg = _config(args, stored, locked=TRAIN_KEYS)
    split = _load_split(corpus)
    if not split.valid:
        raise CommandError("the corpus has no validation sessions; rerun `mansr preprocess` with --valid-fraction > 0")
    art = gate_stage(art, split, cfg)
    ckpt, memory = run / "checkpoint.ckpt", run / "memory.ckpt"
    ck.save_checkpoint(ckpt, art, cfg, memory)
    ck.write_manifest(run / "manifest.train-gate.json", "train-gate", cfg, [ckpt, memory], [corpus, run / "model.ckpt"])
    print(f"gate fitted on {art.gate_result.n_train} examples (best epoch {art.gate_result.best_epoch})")
    return 0


def cmd_evaluate(args) -> int:
    corpus = _corpus_path(args)
    run = _run_dir(args)
    variant = args.variant or RunConfig.variant
    gated = run / "checkpoint.ckpt"
    if variant in BASELINES:
        path = gated if gated.exists() else run / "model.ckpt"
        art, stored = _load_ckpt(path) if path.exists() else (None, None)
    elif variant in ("neural", "neural-fixed") and not gated.exists():
        art, stored = _load_ckpt(_need(run / "model.ckpt", "train"))
    else:
        art, stored = _load_ckpt(_need(gated, "train-gate"))
    cfg = _config(args, stored, locked=TRAIN_KEYS + GATE_KEYS if stored else ())
    split = _load_split(corpus)
    out = Path(args.out) if args.out else run / f"eval-{variant}"
    try:
        tl = evaluate_stage(split, cfg, art, label=variant)
    except InvariantViolation as exc:
        raise CommandError(f"invariant violated in strict mode: {exc}", exit_code=3) from exc
    except ComponentMissing as exc:
        raise CommandError(f"{exc}; run `mansr train-gate` first") from exc
    train_s = sum(art.timings.get(k, 0.0) for k in ("pretrain_seconds", "memory_seconds", "gate_seconds")) if art else 0.0
    try:
        written = export_reports(tl, out, train_seconds=train_s, plots=not args.no_plots)
    except OSError as exc:
        raise CommandError(f"cannot write reports to {out}: {exc}") from exc
    ck.write_manifest(out / "manifest.evaluate.json", "evaluate", cfg, written, [corpus])
    s = tl.summary()
    print(f"{variant}: {s['events']} events, HR@5 {s['HR@5']:.4f}, MRR@5 {s['MRR@5']:.4f}, "
          f"HR@20 {s['HR@20']:.4f}, MRR@20 {s['MRR@20']:.4f}, new events {s['new_event_fraction']:.1%}")
    if tl.checks["violations"]:
        print(f"warning: {tl.checks['violations']} invariant violations", file=sys.stderr)
    return 0


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    from . import plots

    out = Path(args.out)
    rows, curves, buckets = [], {}, {}
    for d in map(Path, args.eval_dirs):
        summary = _need(d / "summary.csv", "evaluate")
        row = _read_csv(summary)[0]
        rows.append(row)
        curve = _read_csv(d / "curve.csv")
        curves[row["model"]] = ([int(r["events"]) for r in curve], [float(r["cum_hr5"]) for r in curve])
        if (d / "buckets.csv").exists():
            buckets[row["model"]] = [{"bucket": int(r["bucket"]), "HR@5": float(r["HR@5"])}
                                     for r in _read_csv(d / "buckets.csv")]
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "comparison.csv"]
    write_comparison(rows, written[0])
    if not args.no_plots:
        written.append(plots.plot_series(curves, out / "curves.png", "cumulative HR@5"))
        if buckets:
            written.append(plots.plot_buckets(buckets, out / "buckets.png"))
    print(format_table(rows))
    ck.write_manifest(out / "manifest.report.json", "report", RunConfig(), written, args.eval_dirs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mansr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw click log -> split corpus file")
    p.add_argument("--input", action="append", type=Path, help="raw click file (repeatable)")
    p.add_argument("--toy", action="store_true", help="use the bundled 200-session toy log")
    p.add_argument("--output", "-o", type=Path, default=Path("corpus.jsonl"))
    p.add_argument("--strict-input", action="store_true", help="fail on the first malformed line")
    _add_config_flags(p)
    p.set_defaults(func=cmd_preprocess)

    for name, func, hlp in (("train", cmd_train, "pretrain the recommender and build the memory"),
                            ("train-gate", cmd_train_gate, "fit the gate on validation data")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--corpus", type=Path)
        p.add_argument("--run-dir", type=Path)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="prequential test run; writes report files")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--out", type=Path, help="report directory (default: RUN_DIR/eval-VARIANT)")
    p.add_argument("--model", "--variant", dest="variant", choices=VARIANTS)
    p.add_argument("--lambda", dest="shallow_weight", type=float, help="fixed neural weight for man-shallow")
    p.add_argument("--no-plots", action="store_true")
    _add_config_flags(p, fixed=("variant", "shallow_weight"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare evaluation directories")
    p.add_argument("eval_dirs", nargs="+")
    p.add_argument("--out", type=Path, default=Path("report"))
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        code = args.func(args)
    except CommandError as exc:
        print(f"mansr {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
