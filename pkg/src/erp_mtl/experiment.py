"""Experiment configuration, run directories, the results ledger and sweeps.

Layout of a results directory::

    <output_dir>/
      experiment.json            resolved config + config hash
      ledger.jsonl               one JSON line per finished or failed job (append-only)
      <variation-key>/run-NNN/
        metrics.tsv              epoch, signal, split, mse
        model.ckpt               final parameters
        manifest.json            seeds, hashes, final POVE

A job counts as done when its manifest exists and carries the current
config hash, so an interrupted sweep resumes by skipping those jobs.
Only the coordinating process writes to the ledger.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import FORMAT_VERSION, checkpoint
from .data import DataError, WordSignalDataset, load_word_signals, make_split
from .encoder import EncoderConfig, SequenceEncoder, Vocabulary, init_params, init_params_shapes
from .signals import ERP_SIGNALS, canonical_order
from .synthetic import GeneratorConfig, SyntheticData, generate_synthetic, read_corpus
from .training import (
    LMHistory,
    NumericalAbort,
    OptimizerHyper,
    PreparedData,
    RunResult,
    TrainConfig,
    TrainingError,
    TrainingVariation,
    joint_and_independent,
    sweep_behavioral_augmentations,
    sweep_erp_combinations,
    train_lm,
    train_run,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "ERP_MTL_WORKERS"
SWEEPS = ("erp-combos", "behavioral", "single", "joint-independent")
# fields that change how a sweep executes but not what it computes
_UNHASHED = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---- configuration ---------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a sweep.

    ``data`` holds either ``{"path": <word-signal TSV>}`` or
    ``{"synthetic": <generator settings>}``. ``encoder_checkpoint`` points at
    the output of ``lm-train``; ``None`` means a randomly initialized encoder
    drawn from ``master_seed`` (useful for tests and the embeddings-only
    baseline).
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    encoder_checkpoint: str | None = None
    train: dict = field(default_factory=dict)
    master_seed: int = 0
    runs: int = 100
    run_start: int = 0
    sweep: str = "single"
    variations: list[list[str]] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    best_combos: dict[str, list[str]] = field(default_factory=dict)
    lm: dict = field(default_factory=dict)
    save_checkpoints: bool = True
    workers: int | None = None
    output_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.run_start < 0:
            raise ConfigError("run_start must be non-negative")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep {self.sweep!r}; expected one of {', '.join(SWEEPS)}")
        if ("path" in self.data) == ("synthetic" in self.data):
            raise ConfigError("data must give exactly one of 'path' or 'synthetic'")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            self.train_config()
        except (TypeError, KeyError, ValueError, TrainingError) as exc:
            raise ConfigError(f"invalid train settings: {exc}") from None

    # the train section is a partial TrainConfig dict; missing keys take defaults
    def train_config(self) -> TrainConfig:
        base = TrainConfig().to_dict()
        merged = _deep_merge(base, self.train)
        return TrainConfig.from_dict(merged)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "data": copy.deepcopy(self.data),
            "encoder_checkpoint": self.encoder_checkpoint,
            "train": self.train_config().to_dict(),
            "master_seed": self.master_seed,
            "runs": self.runs,
            "run_start": self.run_start,
            "sweep": self.sweep,
            "variations": [list(v) for v in self.variations],
            "targets": list(self.targets),
            "best_combos": {k: list(v) for k, v in sorted(self.best_combos.items())},
            "lm": dict(self.lm),
            "save_checkpoints": self.save_checkpoints,
            "workers": self.workers,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if k != "format"}
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in overrides.items():
            if v is None:
                continue
            if k == "train":
                d["train"] = _deep_merge(d["train"], v)
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)

    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else default_workers()

    def hashed_dict(self) -> dict:
        d = self.to_dict()
        for k in _UNHASHED:
            d.pop(k, None)
        inputs = {}
        if "path" in self.data:
            inputs["data"] = _maybe_hash(self.data["path"])
        if self.encoder_checkpoint:
            inputs["encoder"] = _maybe_hash(self.encoder_checkpoint)
        d["inputs"] = inputs
        return d

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.hashed_dict()).encode()).hexdigest()[:16]


def _maybe_hash(path: str) -> str | None:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.glob("*.ckpt")):
            h.update(f.name.encode())
            h.update(sha256_file(f).encode())
        return h.hexdigest()
    return sha256_file(p) if p.exists() else None


def _deep_merge(base: Mapping, over: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---- inputs ------------------------------------------------------------------------

def load_dataset(config: ExperimentConfig) -> tuple[WordSignalDataset, SyntheticData | None]:
    if "path" in config.data:
        return load_word_signals(config.data["path"]), None
    gen = generate_synthetic(GeneratorConfig.from_dict(config.data["synthetic"]))
    return gen.dataset, gen


def load_corpus(config: ExperimentConfig) -> list[list[str]]:
    path = config.lm.get("corpus") or config.data.get("corpus")
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"corpus not found: {path}")
        return read_corpus(p)
    if "synthetic" in config.data:
        return generate_synthetic(GeneratorConfig.from_dict(config.data["synthetic"])).corpus
    raise ConfigError("no LM corpus given (set lm.corpus or data.corpus)")


def encoder_files(path: str | Path) -> list[Path]:
    """A checkpoint path may be one file or an lm-train output directory."""
    p = Path(path)
    if p.is_dir():
        files = [p / "forward.ckpt", p / "backward.ckpt"]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"encoder directory lacks {', '.join(missing)}")
        return files
    if not p.exists():
        raise FileNotFoundError(f"encoder checkpoint not found: {path}")
    return [p]


def load_encoder_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    for f in encoder_files(path):
        t, m = checkpoint.load(f)
        if meta and (m.get("encoder") != meta.get("encoder") or m.get("vocab") != meta.get("vocab")):
            raise checkpoint.CheckpointError(f"{f}: encoder settings differ from its sibling checkpoint")
        meta = meta or m
        tensors.update(t)
    return tensors, meta


def _architecture(cfg: EncoderConfig) -> tuple:
    return (cfg.embedding_dim, cfg.hidden_dim, cfg.output_dim, cfg.layers)


def build_encoder(config: ExperimentConfig, dataset: WordSignalDataset) -> tuple[SequenceEncoder, dict[str, np.ndarray]]:
    train_cfg = config.train_config()
    enc_cfg = train_cfg.encoder
    if config.encoder_checkpoint:
        arrays, meta = load_encoder_arrays(config.encoder_checkpoint)
        saved = EncoderConfig.from_dict(meta["encoder"])
        if _architecture(saved) != _architecture(enc_cfg):
            raise ConfigError(
                f"encoder checkpoint dims {_architecture(saved)} do not match configured dims {_architecture(enc_cfg)}"
            )
        vocab = Vocabulary.from_dict(meta["vocab"])
        shapes = init_params_shapes(enc_cfg, vocab.size)
        missing = sorted(set(shapes) - set(arrays))
        if missing:
            raise checkpoint.CheckpointError(f"encoder checkpoint lacks {missing[:3]}")
        arrays = {n: arrays[n] for n in shapes}
    else:
        vocab = Vocabulary.build([s.words for s in dataset.sentences])
        rng = np.random.default_rng(np.random.SeedSequence([int(config.master_seed), 0xE4C]))
        arrays = init_params(enc_cfg, vocab.size, rng)
    encoder = SequenceEncoder(enc_cfg.without_dropout(), vocab, arrays)
    return encoder, arrays


# ---- variations --------------------------------------------------------------------

def plan_variations(config: ExperimentConfig, dataset: WordSignalDataset, results_dir: Path | None = None) -> list[TrainingVariation]:
    available = set(dataset.signals)
    if config.sweep == "erp-combos":
        erp = [s for s in ERP_SIGNALS if s in available]
        if not erp:
            raise ConfigError("dataset has no ERP signals for an ERP sweep")
        out = sweep_erp_combinations(erp)
    elif config.sweep == "single":
        if not config.variations:
            raise ConfigError("a single sweep needs at least one entry in 'variations'")
        out = [TrainingVariation(tuple(v)) for v in config.variations]
    elif config.sweep == "joint-independent":
        signals = config.targets or list(dataset.signals)
        out = joint_and_independent(signals)
    else:
        if not config.targets:
            raise ConfigError("a behavioral sweep needs 'targets'")
        best = dict(config.best_combos)
        missing = [t for t in config.targets if t not in best]
        if missing:
            if results_dir is None:
                raise ConfigError(f"no best ERP combination for {missing}; run the ERP sweep first or set best_combos")
            from .reporting import best_combinations, load_results

            found = best_combinations(load_results(results_dir, require_hash=None))
            for t in missing:
                if t not in found:
                    raise ConfigError(f"no ERP sweep results for target {t} under {results_dir}")
                best[t] = list(found[t])
        out = []
        for t in config.targets:
            for v in sweep_behavioral_augmentations(t, best[t]):
                absent = [s for s in v.included if s not in available and s not in ERP_SIGNALS]
                if absent:
                    # a dataset without eye-tracking (say) still gets its READ variations
                    log.warning("skipping %s: no %s in the dataset", v.key, ", ".join(absent))
                    continue
                out.append(v)
    seen = set()
    unique = []
    for v in out:
        if v.key not in seen:
            unique.append(v)
            seen.add(v.key)
    for v in unique:
        absent = [s for s in v.included if s not in available]
        if absent:
            raise ConfigError(f"variation {v.key} uses signals missing from the dataset: {absent}")
    return unique


# ---- run directories -------------------------------------------------------------

METRICS_COLUMNS = ("epoch", "signal", "split", "mse")


def header_line(kind: str, config_hash: str, seed: int, **extra) -> str:
    parts = [f"# erp-mtl {kind}", f"format={FORMAT_VERSION}", f"config={config_hash}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def fmt_float(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def run_dir(root: Path, variation_key: str, run_index: int) -> Path:
    return root / variation_key / f"run-{run_index:03d}"


def format_metrics(result: RunResult, config_hash: str, seed: int) -> str:
    lines = [header_line("metrics", config_hash, seed, run=result.run_index, variation=result.variation.key)]
    lines.append("\t".join(METRICS_COLUMNS))
    for epoch, signal, split, mse in result.metrics:
        lines.append(f"{epoch}\t{signal}\t{split}\t{fmt_float(mse)}")
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> list[tuple[int, str, str, float]]:
    rows = []
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not body or tuple(body[0].split("\t")) != METRICS_COLUMNS:
        raise DataError("metrics table has an unexpected header")
    for ln in body[1:]:
        e, s, sp, v = ln.split("\t")
        rows.append((int(e), s, sp, float(v)))
    return rows


def write_run(root: Path, result: RunResult, config_hash: str, seed: int, save_checkpoint: bool = True) -> dict:
    d = run_dir(root, result.variation.key, result.run_index)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.tsv").write_text(format_metrics(result, config_hash, seed), encoding="utf-8")
    ckpt_hash = None
    if save_checkpoint:
        meta = {**result.meta, "format": FORMAT_VERSION, "config_hash": config_hash}
        ckpt_hash = checkpoint.save(d / "model.ckpt", result.params, meta)
    manifest = {
        "format": FORMAT_VERSION,
        "config_hash": config_hash,
        "master_seed": seed,
        "run_index": result.run_index,
        "variation": result.variation.key,
        "signals": list(result.variation.included),
        "split_hash": result.split_hash,
        "epochs": result.epochs,
        "final_mse": {k: fmt_float(v) for k, v in result.final_mse.items()},
        "validation_variance": {k: fmt_float(v) for k, v in result.validation_variance.items()},
        "final_pove": {k: fmt_float(v) for k, v in result.final_pove.items()},
        "checkpoint": "model.ckpt" if save_checkpoint else None,
        "checkpoint_sha256": ckpt_hash,
    }
    # manifest last: its presence marks the job complete
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(d / "manifest.json")
    return manifest


def read_manifest(d: Path) -> dict | None:
    p = d / "manifest.json"
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


class Ledger:
    """Append-only JSON-lines record of job outcomes; one writer per directory."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def append(self, entry: Mapping) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonical_json(dict(entry)) + "\n")
            f.flush()

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for ln in self.path.read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln:
                continue
            try:
                out.append(json.loads(ln))
            except json.JSONDecodeError:
                log.warning("skipping unreadable ledger line in %s", self.path)
        return out


# ---- execution ---------------------------------------------------------------------

@dataclass
class Context:
    config: ExperimentConfig
    config_hash: str
    train: TrainConfig
    data: PreparedData
    encoder_arrays: dict[str, np.ndarray]
    synthetic: SyntheticData | None = None


def prepare_context(config: ExperimentConfig) -> Context:
    dataset, synthetic = load_dataset(config)
    if not dataset.sentences:
        raise DataError("dataset is empty")
    encoder, arrays = build_encoder(config, dataset)
    data = PreparedData.build(dataset, encoder)
    return Context(config, config.config_hash, config.train_config(), data, arrays, synthetic)


def run_job(ctx: Context, variation: TrainingVariation, run_index: int) -> RunResult:
    split = make_split(ctx.config.master_seed, run_index, ctx.data.dataset.sentence_ids)
    return train_run(ctx.train, ctx.data, ctx.encoder_arrays, split, variation, ctx.config.master_seed)


_WORKER_CTX: Context | None = None


def _worker_init(config_dict: dict) -> None:
    global _WORKER_CTX
    warnings.simplefilter("ignore")
    _WORKER_CTX = prepare_context(ExperimentConfig.from_dict(config_dict))


def _worker_job(key: str, run_index: int, root: str) -> tuple[str, int, dict | None, str | None, str | None]:
    ctx = _WORKER_CTX
    assert ctx is not None
    try:
        result = run_job(ctx, TrainingVariation.from_key(key), run_index)
        manifest = write_run(Path(root), result, ctx.config_hash, ctx.config.master_seed, ctx.config.save_checkpoints)
        return key, run_index, manifest, None, None
    except NumericalAbort as exc:
        return key, run_index, None, "numerical", str(exc)
    except (TrainingError, ValueError) as exc:
        return key, run_index, None, "error", f"{type(exc).__name__}: {exc}"


@dataclass
class SweepSummary:
    root: Path
    config_hash: str
    completed: list[tuple[str, int]] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)
    failed: list[tuple[str, int, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def numerical_failure(self) -> bool:
        return any(kind == "numerical" for _, _, kind, _ in self.failed)

    def failure_report(self) -> str:
        lines = [f"{len(self.failed)} job(s) failed:"]
        lines += [f"  {key} run {run}: {msg}" for key, run, _, msg in self.failed]
        return "\n".join(lines)


def write_experiment_record(root: Path, config: ExperimentConfig) -> None:
    """Record the resolved config; refuse to mix configs in one directory."""
    root.mkdir(parents=True, exist_ok=True)
    p = root / "experiment.json"
    record = {"config_hash": config.config_hash, "config": config.hashed_dict()}
    if p.exists():
        try:
            old = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            old = {}
        if old.get("config_hash") != config.config_hash:
            raise ConfigError(
                f"{root} already holds results for config {old.get('config_hash')}; "
                f"this config hashes to {config.config_hash}. Use a different output directory."
            )
        return
    p.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def pending_jobs(root: Path, config_hash: str, variations: Sequence[TrainingVariation], runs: Iterable[int]):
    todo, done = [], []
    for v in variations:
        for r in runs:
            m = read_manifest(run_dir(root, v.key, r))
            if m is not None and m.get("config_hash") == config_hash:
                done.append((v.key, r))
            else:
                todo.append((v.key, r))
    return todo, done


def run_sweep(
    config: ExperimentConfig,
    variations: Sequence[TrainingVariation] | None = None,
    context: Context | None = None,
    progress=None,
) -> SweepSummary:
    """Execute every missing (variation, run) job and record outcomes in the ledger."""
    root = Path(config.output_dir)
    write_experiment_record(root, config)
    ctx = context
    if variations is None:
        if ctx is None:
            ctx = prepare_context(config)
        variations = plan_variations(config, ctx.data.dataset, root)
    runs = range(config.run_start, config.run_start + config.runs)
    todo, done = pending_jobs(root, config.config_hash, variations, runs)
    summary = SweepSummary(root, config.config_hash, skipped=done)
    ledger = Ledger(root / "ledger.jsonl")
    workers = min(config.resolved_workers(), max(1, len(todo)))

    def record(key, run, manifest, kind, msg):
        entry = {"variation": key, "run": run, "config_hash": config.config_hash}
        if manifest is not None:
            entry.update(status="done", split_hash=manifest["split_hash"], final_pove=manifest["final_pove"],
                         checkpoint_sha256=manifest["checkpoint_sha256"])
            summary.completed.append((key, run))
        else:
            entry.update(status="failed", kind=kind, message=msg)
            summary.failed.append((key, run, kind, msg))
        ledger.append(entry)
        if progress is not None:
            progress(key, run, manifest is not None)

    if not todo:
        return summary
    if workers == 1:
        if ctx is None:
            ctx = prepare_context(config)
        global _WORKER_CTX
        previous, _WORKER_CTX = _WORKER_CTX, ctx
        try:
            for key, run in todo:
                record(*_worker_job(key, run, str(root)))
        finally:
            _WORKER_CTX = previous
        return summary

    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(config.to_dict(),)) as pool:
        futures = [pool.submit(_worker_job, key, run, str(root)) for key, run in todo]
        for fut in as_completed(futures):
            record(*fut.result())
    return summary


# ---- language model ------------------------------------------------------------------

def run_lm_training(config: ExperimentConfig, out_dir: str | Path) -> tuple[dict[str, str], LMHistory]:
    """Train forward and backward encoders; write forward.ckpt, backward.ckpt and lm_history.tsv."""
    corpus = load_corpus(config)
    if not corpus:
        raise DataError("LM corpus is empty")
    lm = {"epochs": 5, "learning_rate": 3e-3, "batch_size": 32, **config.lm}
    train_cfg = config.train_config()
    words = list(corpus)
    try:
        dataset, _ = load_dataset(config)
        words += [s.words for s in dataset.sentences]
    except (FileNotFoundError, DataError):
        pass
    vocab = Vocabulary.build(words)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.master_seed), 0xE4C]))
    encoder = SequenceEncoder(train_cfg.encoder, vocab, init_params(train_cfg.encoder, vocab.size, rng))
    ids = [vocab.encode(s) for s in corpus]
    history = train_lm(
        encoder,
        ids,
        epochs=int(lm["epochs"]),
        learning_rate=float(lm["learning_rate"]),
        batch_size=int(lm["batch_size"]),
        seed=config.master_seed,
        hyper=OptimizerHyper.from_dict(config.train_config().hyper.to_dict()),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = encoder.params.arrays()
    meta = {**encoder.meta(), "format": FORMAT_VERSION, "lm": lm, "master_seed": config.master_seed}
    hashes = {}
    for direction, prefix in (("forward", "fwd."), ("backward", "bwd.")):
        part = {k: v for k, v in arrays.items() if k.startswith(prefix)}
        nll = history.series(direction)
        hashes[direction] = checkpoint.save(out / f"{direction}.ckpt", part, {**meta, "direction": direction, "nll": nll})
    lines = [header_line("lm-history", config.config_hash, config.master_seed), "epoch\tdirection\tnll"]
    lines += [f"{e}\t{d}\t{fmt_float(v)}" for e, d, v in history.rows]
    (out / "lm_history.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return hashes, history
