"""Multitask loss, Adam, staged unfreezing and single training runs."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tape, Tensor
from .data import SplitSpec, WordSignalDataset, apply_standardization, fit_standardization, transformed_values
from .decoder import DecoderConfig, SideInputScaling
from .decoder import init_params as init_decoder_params
from .encoder import EncoderConfig, SequenceEncoder, Vocabulary, final_layer_names, variant_param_names
from .model import Batch, ErpModel, make_batch
from .signals import ERP_SIGNALS, EYE_SIGNALS, canonical_order
from .stats import pove

log = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


class NumericalAbort(TrainingError):
    """Raised when a loss or gradient stops being finite."""


# ---- variations ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingVariation:
    included: tuple[str, ...]
    target: str | None = None

    def __post_init__(self):
        if not self.included:
            raise TrainingError("a variation needs at least one signal")
        object.__setattr__(self, "included", canonical_order(self.included))
        if self.target is not None and self.target not in self.included:
            raise TrainingError(f"target {self.target} is not among the included signals")

    @property
    def key(self) -> str:
        return "+".join(self.included)

    @classmethod
    def from_key(cls, key: str, target: str | None = None) -> "TrainingVariation":
        return cls(tuple(key.split("+")), target)

    def __len__(self) -> int:
        return len(self.included)


def sweep_erp_combinations(signals: Sequence[str] = ERP_SIGNALS) -> list[TrainingVariation]:
    """Every non-empty subset, ordered by size then by registry order."""
    names = canonical_order(signals)
    return [
        TrainingVariation(combo)
        for r in range(1, len(names) + 1)
        for combo in itertools.combinations(names, r)
    ]


def sweep_behavioral_augmentations(target: str, best_erp_combo: Iterable[str]) -> list[TrainingVariation]:
    """Target alone, with its best ERP partners, with READ, with the four eye measures, and mixes."""
    best = set(best_erp_combo) | {target}
    forms = [
        {target},
        best,
        {target, "READ"},
        {target, *EYE_SIGNALS},
        best | {"READ"},
        best | set(EYE_SIGNALS),
    ]
    out: list[TrainingVariation] = []
    seen = set()
    for f in forms:
        v = TrainingVariation(tuple(f), target)
        if v.key not in seen:
            seen.add(v.key)
            out.append(v)
    return out


def joint_and_independent(signals: Sequence[str]) -> list[TrainingVariation]:
    """Each signal alone plus all of them together."""
    names = canonical_order(signals)
    out = [TrainingVariation((s,)) for s in names]
    if len(names) > 1:
        out.append(TrainingVariation(names))
    return out


# ---- loss ------------------------------------------------------------------------

def build_loss(
    variation: TrainingVariation | Sequence[str],
    predictions: Tensor,
    targets: np.ndarray,
    content_mask: np.ndarray,
) -> Tensor:
    """Summed squared error over content tokens and included signals, over the content-token count.

    ``predictions`` and ``targets`` carry one column per included signal,
    in the variation's order. Missing targets (NaN) contribute nothing.
    """
    n_sig = len(variation.included if isinstance(variation, TrainingVariation) else variation)
    if predictions.shape[-1] != n_sig or targets.shape != predictions.shape:
        raise ad.ShapeError("build_loss", f"predictions {predictions.shape} / targets {targets.shape} "
                            f"do not match {n_sig} signals")
    content = np.asarray(content_mask, bool)
    n_content = int(content.sum())
    if n_content == 0:
        raise TrainingError("batch has no content tokens")
    present = ~np.isnan(targets)
    weight = (content[..., None] & present).astype(np.float64) * (predictions.data.size / n_content)
    filled = np.where(present, targets, 0.0)
    dtype = predictions.dtype
    sq = ad.squared_error(predictions, Tensor(filled.astype(dtype)))
    return ad.mean(ad.multiply(sq, Tensor(weight.astype(dtype))))


# ---- optimizer -------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerHyper:
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3
    encoder_learning_rate: float = 1e-4
    stage_learning_rates: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise TrainingError("Adam betas must lie strictly between 0 and 1")
        object.__setattr__(self, "stage_learning_rates", tuple(tuple(x) for x in self.stage_learning_rates))

    def rate_for(self, name: str, stage: str | None = None) -> float:
        overrides = dict(self.stage_learning_rates)
        if stage is not None and stage in overrides:
            return overrides[stage]
        return self.learning_rate if name.startswith("dec.") else self.encoder_learning_rate

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "learning_rate": self.learning_rate,
            "encoder_learning_rate": self.encoder_learning_rate,
            "stage_learning_rates": [list(x) for x in self.stage_learning_rates],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimizerHyper":
        d = dict(d)
        d["stage_learning_rates"] = tuple(tuple(x) for x in d.get("stage_learning_rates", ()))
        return cls(**d)


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    hyper: OptimizerHyper,
    state: dict[str, Moments],
    learning_rates: Mapping[str, float] | float | None = None,
    frozen: Iterable[str] = (),
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and updates ``state`` in place.

    Each parameter keeps its own step count, so a tensor unfrozen late
    starts with a fresh bias correction. Frozen names are returned
    untouched (the same array object).
    """
    frozen = set(frozen)
    out = {}
    for name, p in params.items():
        if name in frozen or name not in grads:
            out[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError("adam_step", f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient for {name}")
        st = state.get(name)
        if st is None:
            st = state[name] = Moments(np.zeros_like(p), np.zeros_like(p))
        st.step += 1
        st.m = hyper.beta1 * st.m + (1 - hyper.beta1) * g
        st.v = hyper.beta2 * st.v + (1 - hyper.beta2) * (g * g)
        m_hat = st.m / (1 - hyper.beta1**st.step)
        v_hat = st.v / (1 - hyper.beta2**st.step)
        if learning_rates is None:
            lr = hyper.rate_for(name)
        elif isinstance(learning_rates, Mapping):
            lr = learning_rates[name]
        else:
            lr = float(learning_rates)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon)).astype(p.dtype)
    return out


# ---- schedules -------------------------------------------------------------------

TRAINABLE_SETS = ("decoder-only", "decoder+final-encoder-layer", "all")


@dataclass(frozen=True)
class Stage:
    start: int
    end: int
    trainable: str

    def __post_init__(self):
        if self.trainable not in TRAINABLE_SETS:
            raise TrainingError(f"unknown trainable set {self.trainable!r}")
        if self.end <= self.start:
            raise TrainingError("stage must span at least one epoch")


@dataclass(frozen=True)
class Schedule:
    name: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages or self.stages[0].start != 0:
            raise TrainingError("schedule must start at epoch 0")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.start != a.end:
                raise TrainingError("schedule stages must be contiguous")

    @property
    def epochs(self) -> int:
        return self.stages[-1].end

    def stage_at(self, epoch: int) -> Stage:
        for s in self.stages:
            if s.start <= epoch < s.end:
                return s
        raise TrainingError(f"epoch {epoch} outside schedule")

    @property
    def boundaries(self) -> list[int]:
        return [s.start for s in self.stages[1:]]

    def to_dict(self) -> dict:
        return {"name": self.name, "stages": [[s.start, s.end, s.trainable] for s in self.stages]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schedule":
        return cls(d["name"], tuple(Stage(*s) for s in d["stages"]))


DEFAULT_SCHEDULE = Schedule("default", (Stage(0, 20, "decoder-only"), Stage(20, 35, "decoder+final-encoder-layer")))
EXTENDED_SCHEDULE = Schedule(
    "extended",
    (Stage(0, 20, "decoder-only"), Stage(20, 40, "decoder+final-encoder-layer"), Stage(40, 60, "all")),
)
SCHEDULES = {"default": DEFAULT_SCHEDULE, "extended": EXTENDED_SCHEDULE}


def get_schedule(name_or_dict) -> Schedule:
    if isinstance(name_or_dict, Schedule):
        return name_or_dict
    if isinstance(name_or_dict, Mapping):
        return Schedule.from_dict(name_or_dict)
    try:
        return SCHEDULES[name_or_dict]
    except KeyError:
        raise TrainingError(f"unknown schedule {name_or_dict!r}; expected one of {sorted(SCHEDULES)}") from None


def trainable_names(trainable: str, encoder_config: EncoderConfig, all_names: Iterable[str]) -> set[str]:
    names = set(all_names)
    dec = {n for n in names if n.startswith("dec.")}
    used = set(variant_param_names(encoder_config))
    if trainable == "decoder-only":
        return dec
    if trainable == "decoder+final-encoder-layer":
        if encoder_config.variant == "embeddings-only":
            return dec
        return dec | (set(final_layer_names(encoder_config)) & used)
    return dec | used


# ---- run inputs ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pair_dim: int = 10
    hyper: OptimizerHyper = field(default_factory=OptimizerHyper)
    schedule: Schedule = DEFAULT_SCHEDULE
    batch_size: int = 32
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "pair_dim": self.pair_dim,
            "hyper": self.hyper.to_dict(),
            "schedule": self.schedule.to_dict(),
            "batch_size": self.batch_size,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            pair_dim=d.get("pair_dim", 10),
            hyper=OptimizerHyper.from_dict(d.get("hyper", {})),
            schedule=get_schedule(d.get("schedule", "default")),
            batch_size=d.get("batch_size", 32),
            dtype=d.get("dtype", "float32"),
        )


@dataclass
class PreparedData:
    """Split-independent per-sentence arrays for one dataset and encoder."""

    dataset: WordSignalDataset
    ids: list[np.ndarray]
    word_length: list[np.ndarray]
    log_prob: list[np.ndarray]
    content: list[np.ndarray]
    values: np.ndarray  # (P, N, S), durations log-transformed
    vocab: Vocabulary

    @classmethod
    def build(cls, dataset: WordSignalDataset, encoder: SequenceEncoder) -> "PreparedData":
        ids = [encoder.vocab.encode(s.words) for s in dataset.sentences]
        lp = encoder.batch_log_probs(ids)
        wl = [np.array([t.word_length for t in s.tokens], dtype=np.float64) for s in dataset.sentences]
        content = [np.array([t.is_content for t in s.tokens], dtype=bool) for s in dataset.sentences]
        for sent, row in zip(dataset.sentences, lp):
            for tok, v in zip(sent.tokens, row):
                tok.log_prob = float(v)
        return cls(dataset, ids, wl, lp, content, transformed_values(dataset), encoder.vocab)

    def sentence_indices(self, ids: Iterable[str]) -> np.ndarray:
        pos = {s.id: i for i, s in enumerate(self.dataset.sentences)}
        return np.array(sorted(pos[i] for i in ids), dtype=np.int64)


@dataclass
class RunTargets:
    signals: tuple[str, ...]
    per_sentence: list[np.ndarray]  # (len, S) standardized targets
    train_idx: np.ndarray
    val_idx: np.ndarray
    scaling: SideInputScaling
    stats: object


def prepare_targets(data: PreparedData, split: SplitSpec, signals: Sequence[str]) -> RunTargets:
    ds = data.dataset
    cols = [ds.signal_index(s) for s in signals]
    content_tok = np.concatenate(data.content)
    train_tok = ds.sentence_mask(split.train_ids) & content_tok
    values = data.values[:, :, cols]
    stats = fit_standardization(values, train_tok, list(signals))
    series = apply_standardization(values, stats)
    per_sentence = [series[ds.offsets[i] : ds.offsets[i + 1]] for i in range(len(ds.sentences))]
    wl = np.concatenate(data.word_length)[train_tok]
    lp = np.concatenate(data.log_prob)[train_tok]
    return RunTargets(
        tuple(signals),
        per_sentence,
        data.sentence_indices(split.train_ids),
        data.sentence_indices(split.test_ids),
        SideInputScaling.fit(wl, lp),
        stats,
    )


# ---- results ---------------------------------------------------------------------

@dataclass
class RunResult:
    run_index: int
    variation: TrainingVariation
    split_hash: str
    metrics: list[tuple[int, str, str, float]]  # (epoch, signal, "train"|"validation", mse)
    final_mse: dict[str, float]
    validation_variance: dict[str, float]
    final_pove: dict[str, float]
    params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    meta: dict = field(default_factory=dict)
    checkpoint: str | None = None

    @property
    def epochs(self) -> int:
        return 1 + max(e for e, *_ in self.metrics) if self.metrics else 0

    def curve(self, signal: str, split: str = "validation") -> np.ndarray:
        rows = sorted((e, v) for e, s, sp, v in self.metrics if s == signal and sp == split)
        return np.array([v for _, v in rows])


def seed_stream(master_seed: int, run_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(run_index), int(stream)]))


_STREAM_DECODER, _STREAM_SHUFFLE, _STREAM_DROPOUT = 1, 2, 3


def _signal_stream(master_seed: int, run_index: int, signal: str) -> np.random.Generator:
    code = sum((i + 1) * ord(c) for i, c in enumerate(signal))
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(run_index), 100, code]))


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


class _Evaluator:
    """Eval-mode MSE per signal, reusing encoder outputs while the encoder is frozen."""

    def __init__(self, model: ErpModel, data: PreparedData, targets: RunTargets, batch_size: int = 64):
        self.model = model
        self.data = data
        self.targets = targets
        self.batch_size = batch_size
        self._cache: dict[int, Tensor] = {}
        self._batches: list[tuple[np.ndarray, Batch]] = []
        for part in (targets.train_idx, targets.val_idx):
            for chunk in _batches(part, batch_size):
                self._batches.append((chunk, _make(data, targets, chunk)))

    def invalidate(self) -> None:
        self._cache.clear()

    def mse(self, signals: Sequence[str]) -> dict[str, dict[str, float]]:
        cols = [self.targets.signals.index(s) for s in signals]
        sums = {sp: np.zeros(len(signals)) for sp in ("train", "validation")}
        counts = {sp: np.zeros(len(signals)) for sp in ("train", "validation")}
        val_set = set(self.targets.val_idx.tolist())
        for k, (chunk, batch) in enumerate(self._batches):
            ctx = self._cache.get(k)
            if ctx is None:
                ctx = self._cache[k] = self.model.context(batch)
            pred = self.model.predict_from_context(ctx, batch, signals).data.astype(np.float64)
            tgt = batch.targets[..., cols]
            ok = batch.content[..., None] & ~np.isnan(tgt)
            err = np.where(ok, (pred - np.nan_to_num(tgt)) ** 2, 0.0)
            sp = "validation" if int(chunk[0]) in val_set else "train"
            sums[sp] += err.sum(axis=(0, 1))
            counts[sp] += ok.sum(axis=(0, 1))
        out = {}
        for sp in sums:
            with np.errstate(invalid="ignore", divide="ignore"):
                vals = sums[sp] / counts[sp]
            out[sp] = {s: float(v) for s, v in zip(signals, vals)}
        return out


def _make(data: PreparedData, targets: RunTargets, idx: np.ndarray) -> Batch:
    return make_batch(
        [data.ids[i] for i in idx],
        [data.word_length[i] for i in idx],
        [data.log_prob[i] for i in idx],
        [data.content[i] for i in idx],
        [targets.per_sentence[i] for i in idx],
    )


def validation_variance(targets: RunTargets, data: PreparedData) -> dict[str, float]:
    out = {}
    for k, s in enumerate(targets.signals):
        vals = np.concatenate([targets.per_sentence[i][:, k][data.content[i]] for i in targets.val_idx])
        vals = vals[~np.isnan(vals)]
        out[s] = float(vals.var()) if vals.size else float("nan")
    return out


EpochCallback = Callable[[int, Stage, ParameterSet], None]


def train_run(
    config: TrainConfig,
    data: PreparedData,
    encoder_arrays: Mapping[str, np.ndarray],
    split: SplitSpec,
    variation: TrainingVariation,
    master_seed: int,
    on_epoch_end: EpochCallback | None = None,
) -> RunResult:
    """Train one decoder (and later encoder layers) for one split and loss variation.

    Everything random is drawn from streams keyed by (master_seed,
    run_index), so the result is a pure function of the inputs and runs
    that differ only in ``variation`` share split, initialization,
    batch order and dropout masks.
    """
    signals = variation.included
    run = split.run_index
    dtype = np.dtype(config.dtype)
    targets = prepare_targets(data, split, signals)
    if targets.val_idx.size == 0:
        raise TrainingError("split has no validation sentences")

    enc_cfg = config.encoder
    vocab = data.vocab
    dec_cfg = DecoderConfig(config.pair_dim, signals, enc_cfg.context_width)
    dec_rng = seed_stream(master_seed, run, _STREAM_DECODER)
    dec_params = init_decoder_params(
        dec_cfg, dec_rng, signal_rngs={s: _signal_stream(master_seed, run, s) for s in signals}
    )
    model = ErpModel.build(enc_cfg, vocab, dict(encoder_arrays), dec_cfg, dec_params, dtype, targets.scaling)
    params = model.params

    shuffle_rng = seed_stream(master_seed, run, _STREAM_SHUFFLE)
    drop_rng = seed_stream(master_seed, run, _STREAM_DROPOUT)
    state: dict[str, Moments] = {}
    evaluator = _Evaluator(model, data, targets)
    metrics: list[tuple[int, str, str, float]] = []
    variance = validation_variance(targets, data)
    names = params.names()
    current_stage = None
    last: dict[str, dict[str, float]] = {}

    for epoch in range(config.schedule.epochs):
        stage = config.schedule.stage_at(epoch)
        if stage is not current_stage:
            active = trainable_names(stage.trainable, enc_cfg, names)
            params.set_trainable(lambda n: n in active)
            encoder_moving = any(not n.startswith("dec.") for n in active)
            current_stage = stage
            evaluator.invalidate()
        rates = {n: config.hyper.rate_for(n, stage.trainable) for n in active}
        order = shuffle_rng.permutation(targets.train_idx)
        for chunk in _batches(order, config.batch_size):
            batch = _make(data, targets, chunk)
            if not batch.content.any():
                continue
            # overflow shows up as a non-finite loss or gradient, reported as NumericalAbort
            with np.errstate(over="ignore", invalid="ignore"):
                with Tape() as tape:
                    pred = model.forward(batch, signals, training=True, rng=drop_rng)
                    loss = build_loss(variation, pred, batch.targets, batch.content)
                if not np.isfinite(loss.data):
                    raise NumericalAbort(f"non-finite loss at epoch {epoch} (run {run}, {variation.key})")
                trainable = params.trainable_tensors()
                grads = ad.backward(tape, loss, trainable)
                new = adam_step({n: t.data for n, t in trainable.items()}, grads, config.hyper, state, rates)
            for n, arr in new.items():
                params[n].data = arr
        if encoder_moving:
            evaluator.invalidate()
        last = evaluator.mse(signals)
        for sp in ("train", "validation"):
            for s in signals:
                metrics.append((epoch, s, sp, last[sp][s]))
        if on_epoch_end is not None:
            on_epoch_end(epoch, stage, params)

    final_mse = dict(last.get("validation", {}))
    final_pove = {s: pove(final_mse[s], variance[s]) for s in signals}
    return RunResult(
        run_index=run,
        variation=variation,
        split_hash=split.hash,
        metrics=metrics,
        final_mse=final_mse,
        validation_variance=variance,
        final_pove=final_pove,
        params=params.arrays(),
        meta={**model.meta(), "train": config.to_dict(), "master_seed": master_seed, "run_index": run,
              "variation": variation.key, "split_hash": split.hash},
    )


def prepare_data(dataset: WordSignalDataset, encoder: SequenceEncoder) -> PreparedData:
    return PreparedData.build(dataset, encoder)


# ---- language-model training -----------------------------------------------------

@dataclass
class LMHistory:
    rows: list[tuple[int, str, float]] = field(default_factory=list)  # (epoch, direction, mean nll)

    def series(self, direction: str) -> list[float]:
        return [v for _, d, v in self.rows if d == direction]


def train_lm(
    encoder: SequenceEncoder,
    sentences: Sequence[np.ndarray],
    epochs: int,
    learning_rate: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
    directions: Sequence[str] = ("forward", "backward"),
    hyper: OptimizerHyper | None = None,
    training: bool = True,
) -> LMHistory:
    """Fit each direction independently on next/previous-word NLL."""
    hyper = hyper or OptimizerHyper()
    usable = [np.asarray(s, dtype=np.int64) for s in sentences if len(s) >= 2]
    if not usable:
        raise TrainingError("corpus has no sentence with at least two tokens")
    history = LMHistory()
    params = encoder.params
    for d_i, direction in enumerate(directions):
        prefix = "fwd." if direction == "forward" else "bwd."
        params.set_trainable(lambda n: n.startswith(prefix))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, d_i]))
        state: dict[str, Moments] = {}
        for epoch in range(epochs):
            order = rng.permutation(len(usable))
            total = 0.0
            weight = 0
            for chunk in _batches(order, batch_size):
                batch = [usable[i] for i in chunk]
                with Tape() as tape:
                    loss = encoder.lm_loss(batch, direction, training=training, rng=rng)
                if not np.isfinite(loss.data):
                    raise NumericalAbort(f"non-finite LM loss in epoch {epoch} ({direction})")
                n = sum(len(s) - 1 for s in batch)
                total += float(loss.data) * n
                weight += n
                trainable = params.trainable_tensors()
                grads = ad.backward(tape, loss, trainable)
                new = adam_step({k: t.data for k, t in trainable.items()}, grads, hyper, state, learning_rate)
                for k, arr in new.items():
                    params[k].data = arr
            history.rows.append((epoch, direction, total / weight))
            log.info("lm %s epoch %d nll %.4f", direction, epoch, total / weight)
    params.set_trainable(lambda n: False)
    return history


def evaluate_lm(encoder: SequenceEncoder, sentences: Sequence[np.ndarray], direction: str, batch_size: int = 64) -> float:
    usable = [np.asarray(s, dtype=np.int64) for s in sentences if len(s) >= 2]
    total = 0.0
    weight = 0
    for i in range(0, len(usable), batch_size):
        batch = usable[i : i + batch_size]
        n = sum(len(s) - 1 for s in batch)
        total += float(encoder.lm_loss(batch, direction).data) * n
        weight += n
    return total / weight
