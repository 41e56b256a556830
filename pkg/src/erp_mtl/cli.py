"""Command-line entry point: ``erp-mtl <subcommand>``.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numerical abort.
Settings come from an optional JSON config (``--config``); flags override it.
The default worker count comes from ``ERP_MTL_WORKERS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import FORMAT_VERSION, __version__
from .checkpoint import CheckpointError
from .data import DataError, DataWarning, load_word_signals
from .experiment import (
    WORKERS_ENV,
    ConfigError,
    ExperimentConfig,
    plan_variations,
    prepare_context,
    run_lm_training,
    run_sweep,
)
from .signals import UnknownSignalError
from .synthetic import GeneratorConfig, GeneratorConfigError, generate_synthetic, write_synthetic
from .training import NumericalAbort, TrainingError, TrainingVariation

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("erp_mtl")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---- config assembly ------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", help="word-signal TSV (replaces the config's data section)")
    p.add_argument("--encoder", help="encoder checkpoint file or lm-train output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--runs", type=int, help="number of runs (train/test splits)")
    p.add_argument("--run-start", type=int, help="first run index")
    p.add_argument("--schedule", choices=("default", "extended"))
    p.add_argument("--variant", choices=("bidirectional", "forward-only", "embeddings-only"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="decoder learning rate")
    p.add_argument("--encoder-lr", type=float, help="learning rate for unfrozen encoder layers")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    p.add_argument("--output", "-o", help="output directory")
    p.add_argument("--no-checkpoints", action="store_true", help="skip writing model.ckpt per run")


def _config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    train: dict = {}
    if args.schedule:
        train["schedule"] = args.schedule
    if args.batch_size is not None:
        train["batch_size"] = args.batch_size
    if args.dtype:
        train["dtype"] = args.dtype
    if args.variant:
        train.setdefault("encoder", {})["variant"] = args.variant
    hyper = {}
    if args.lr is not None:
        hyper["learning_rate"] = args.lr
    if args.encoder_lr is not None:
        hyper["encoder_learning_rate"] = args.encoder_lr
    if hyper:
        train["hyper"] = hyper
    overrides = {
        "data": {"path": args.data} if args.data else None,
        "encoder_checkpoint": args.encoder,
        "master_seed": args.seed,
        "runs": args.runs,
        "run_start": args.run_start,
        "workers": args.workers,
        "output_dir": args.output,
        "train": train or None,
    }
    if getattr(args, "no_checkpoints", False):
        overrides["save_checkpoints"] = False
    return base.with_overrides(**overrides)


def _parse_signals(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


# ---- subcommands -------------------------------------------------------------------

def cmd_lm_train(args) -> int:
    cfg = _config_from_args(args)
    lm = dict(cfg.lm)
    if args.corpus:
        lm["corpus"] = args.corpus
        if not Path(args.corpus).exists():
            raise CliError(f"corpus not found: {args.corpus}", EXIT_IO)
    if args.epochs is not None:
        lm["epochs"] = args.epochs
    if args.lm_lr is not None:
        lm["learning_rate"] = args.lm_lr
    cfg = cfg.with_overrides(lm=lm)
    out = Path(args.output or "encoder")
    hashes, history = run_lm_training(cfg, out)
    for d in ("forward", "backward"):
        series = history.series(d)
        print(f"{d}\tnll {series[0]:.4f} -> {series[-1]:.4f}\tsha256 {hashes[d]}")
    print(f"wrote {out}/forward.ckpt, {out}/backward.ckpt, {out}/lm_history.tsv")
    return EXIT_OK


def _finish_sweep(summary) -> int:
    print(f"{len(summary.completed)} run(s) completed, {len(summary.skipped)} already present "
          f"(config {summary.config_hash}) in {summary.root}")
    if summary.failed:
        print(summary.failure_report(), file=sys.stderr)
        return EXIT_NUMERICAL if summary.numerical_failure else EXIT_INVALID
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if args.signals:
        cfg = cfg.with_overrides(sweep="single", variations=[_parse_signals(args.signals)])
    elif cfg.sweep != "single" or not cfg.variations:
        raise CliError("train needs --signals or a config with sweep 'single' and 'variations'", EXIT_INVALID)
    return _finish_sweep(run_sweep(cfg, progress=_progress))


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    over = {}
    if args.sweep:
        over["sweep"] = args.sweep
    if args.targets:
        over["targets"] = _parse_signals(args.targets)
    if over:
        cfg = cfg.with_overrides(**over)
    if args.dry_run:
        ctx = prepare_context(cfg)
        variations = plan_variations(cfg, ctx.data.dataset, Path(cfg.output_dir))
        for v in variations:
            print(v.key)
        print(f"{len(variations)} variation(s) x {cfg.runs} run(s); config {cfg.config_hash}")
        return EXIT_OK
    return _finish_sweep(run_sweep(cfg, progress=_progress))


def cmd_report(args) -> int:
    from .reporting import ConfigMismatchError, EmptyResultsError, write_report

    try:
        out = write_report(args.results, args.output, q=args.q, figures=not args.no_figures)
    except (EmptyResultsError, ConfigMismatchError) as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    for f in out.files:
        print(f)
    for s, paths in out.curves.items():
        for p in paths:
            print(p)
    for f in out.figures:
        print(f)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read {args.config}: {exc.strerror}", EXIT_IO) from None
        cfg = GeneratorConfig.from_dict(raw)
    else:
        cfg = GeneratorConfig()
    over = {}
    for flag, key in (("seed", "seed"), ("sentences", "n_sentences"), ("participants", "n_participants"),
                      ("noise", "noise_std"), ("lm_sentences", "lm_sentences"), ("vocab_size", "vocab_size")):
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    if args.signals:
        over["signals"] = _parse_signals(args.signals)
    if over:
        cfg = GeneratorConfig.from_dict({**cfg.to_dict(), **over})
    data = generate_synthetic(cfg)
    paths = write_synthetic(data, args.output)
    for name, p in sorted(paths.items()):
        print(f"{name}\t{p}")
    for s, c in data.ceilings.items():
        print(f"ceiling\t{s}\t{c:.6f}")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DataWarning)
        ds = load_word_signals(args.path)
    report = ds.report()
    report["format"] = FORMAT_VERSION
    report["warnings"] = [str(w.message) for w in caught]
    print(json.dumps(report, indent=2, sort_keys=True))
    if not ds.sentences:
        print(f"{args.path}: no records", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _progress(key: str, run: int, ok: bool) -> None:
    log.info("%s run %d %s", key, run, "done" if ok else "FAILED")


# ---- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erp-mtl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lm-train", help="train forward and backward LM encoders on a corpus")
    _add_common(p)
    p.add_argument("--corpus", help="one whitespace-tokenized sentence per line")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lm-lr", type=float)
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("train", help="train one variation over a range of runs")
    _add_common(p)
    p.add_argument("--signals", help="comma-separated signals trained together, e.g. N400,P600")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a family of variations (resumable)")
    _add_common(p)
    p.add_argument("--sweep", choices=("erp-combos", "behavioral", "single", "joint-independent"))
    p.add_argument("--targets", help="comma-separated target signals (behavioral / joint-independent)")
    p.add_argument("--dry-run", action="store_true", help="list the planned variations and exit")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summary tables, comparisons and curves from a results directory")
    p.add_argument("results")
    p.add_argument("--output", "-o", help="report directory (default: <results>/report)")
    p.add_argument("--q", type=float, default=0.01, help="false discovery rate for BHY")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth-data", help="write a synthetic dataset with known ground truth")
    p.add_argument("--config", help="JSON generator settings")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sentences", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--lm-sentences", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--signals")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("validate-data", help="parse a word-signal file and print a summary")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, IsADirectoryError, PermissionError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DataError, GeneratorConfigError, UnknownSignalError, TrainingError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
