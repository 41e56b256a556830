"""Word-level signal tables: loading, transforms, splits and standardization.

Table format (tab-separated, UTF-8)::

    # erp-mtl word-signals v1
    sentence_id  word_index  participant_id  word  pos  <SIGNAL> ...

One row per (sentence, word, participant). Signal columns are any subset
of the eleven signal names; blank cells are missing values. ``pos`` is a
Universal Dependencies tag. Eye-tracking and reading columns hold raw
durations in milliseconds; ERP columns hold component amplitudes that
were filtered and modulus-transformed upstream.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .signals import SIGNALS, UnknownSignalError, canonical_order, descriptor

FORMAT_TAG = "# erp-mtl word-signals v1"
KEY_COLUMNS = ("sentence_id", "word_index", "participant_id", "word", "pos")

CONTENT_TAGS = frozenset({"ADJ", "ADV", "AUX", "NOUN", "PRON", "PROPN", "VERB"})
FUNCTION_TAGS = frozenset({"ADP", "CCONJ", "DET", "INTJ", "NUM", "PART", "PUNCT", "SCONJ", "SYM", "X"})
_TAG_ALIASES = {
    "ADJECTIVE": "ADJ",
    "ADVERB": "ADV",
    "AUXILIARY": "AUX",
    "AUXILIARY VERB": "AUX",
    "PRONOUN": "PRON",
    "PROPER NOUN": "PROPN",
    "DETERMINER": "DET",
    "PREPOSITION": "ADP",
    "CONJUNCTION": "CCONJ",
    "PARTICLE": "PART",
}


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateKeyError(DataError):
    def __init__(self, key):
        super().__init__(f"duplicate record for (sentence, word, participant, signal) = {key}")
        self.key = key


class NonPositiveValueError(DataError):
    def __init__(self, records):
        shown = ", ".join(str(r) for r in records[:10])
        more = f" (+{len(records) - 10} more)" if len(records) > 10 else ""
        super().__init__(f"log transform needs positive values; offending records: {shown}{more}")
        self.records = records


class DataWarning(UserWarning):
    pass


def normalize_tag(pos: str) -> str:
    tag = pos.strip().upper()
    return _TAG_ALIASES.get(tag, tag)


@dataclass
class Token:
    text: str
    pos: str
    word_length: int = 0
    log_prob: float | None = None

    def __post_init__(self):
        if not self.word_length:
            self.word_length = len(self.text)

    @property
    def is_content(self) -> bool:
        return classify_content(self)


def classify_content(token: Token) -> bool:
    """Content words: adjectives, adverbs, auxiliaries, nouns, pronouns, proper nouns, verbs."""
    if token.pos is None or not str(token.pos).strip():
        raise DataError(f"token {token.text!r} has no POS tag")
    return normalize_tag(token.pos) in CONTENT_TAGS


@dataclass
class Sentence:
    id: str
    tokens: list[Token]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]


@dataclass(frozen=True)
class SignalFrame:
    sentence_id: str
    word_index: int
    participant_id: str
    signal: str
    value: float


@dataclass
class WordSignalDataset:
    """Sentences plus a (participant, token, signal) value cube with NaN for missing."""

    sentences: list[Sentence]
    participants: list[str]
    signals: tuple[str, ...]
    values: np.ndarray
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.signals = tuple(self.signals)
        lengths = [len(s) for s in self.sentences]
        self.offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        expected = (len(self.participants), int(self.offsets[-1]), len(self.signals))
        if self.values.shape != expected:
            raise DataError(f"value cube has shape {self.values.shape}, expected {expected}")
        if len({s.id for s in self.sentences}) != len(self.sentences):
            raise DataError("sentence ids must be unique")

    @property
    def n_tokens(self) -> int:
        return int(self.offsets[-1])

    @property
    def sentence_ids(self) -> list[str]:
        return [s.id for s in self.sentences]

    def tokens(self) -> list[Token]:
        return [t for s in self.sentences for t in s.tokens]

    def content_mask(self) -> np.ndarray:
        return np.array([t.is_content for t in self.tokens()], dtype=bool)

    def token_sentence_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.sentences)), np.diff(self.offsets))

    def sentence_mask(self, ids) -> np.ndarray:
        """Token-level mask selecting the given sentence ids."""
        wanted = set(ids)
        per_sentence = np.array([s.id in wanted for s in self.sentences], dtype=bool)
        return per_sentence[self.token_sentence_index()] if self.n_tokens else np.zeros(0, bool)

    def signal_index(self, name: str) -> int:
        try:
            return self.signals.index(name)
        except ValueError:
            raise UnknownSignalError(f"signal {name!r} not present in dataset") from None

    def frames(self) -> Iterator[SignalFrame]:
        for s_idx, sent in enumerate(self.sentences):
            for w in range(len(sent)):
                n = self.offsets[s_idx] + w
                for p_idx, pid in enumerate(self.participants):
                    for k, sig in enumerate(self.signals):
                        v = self.values[p_idx, n, k]
                        if not math.isnan(v):
                            yield SignalFrame(sent.id, w, pid, sig, float(v))

    def report(self) -> dict:
        present = ~np.isnan(self.values)
        return {
            "sentences": len(self.sentences),
            "tokens": self.n_tokens,
            "content_tokens": int(self.content_mask().sum()) if self.n_tokens else 0,
            "participants": len(self.participants),
            "signals": list(self.signals),
            "observations": {s: int(present[..., k].sum()) for k, s in enumerate(self.signals)},
            "rows": self.n_tokens * len(self.participants),
        }


def empty_dataset(signals: Sequence[str] = ()) -> WordSignalDataset:
    return WordSignalDataset([], [], tuple(signals), np.zeros((0, 0, len(signals))))


# ---- table I/O ----------------------------------------------------------------

def _parse_value(cell: str, line: int, column: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.upper() == "NA":
        return math.nan
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(line, f"column {column}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise ParseError(line, f"column {column}: non-finite value {cell!r}")
    return v


def read_word_signals(text: str) -> WordSignalDataset:
    lines = text.splitlines()
    body_start = 0
    while body_start < len(lines) and (not lines[body_start].strip() or lines[body_start].startswith("#")):
        if lines[body_start].startswith("# erp-mtl word-signals") and lines[body_start].strip() != FORMAT_TAG:
            raise ParseError(body_start + 1, f"unsupported format tag {lines[body_start].strip()!r}")
        body_start += 1
    if body_start >= len(lines):
        warnings.warn("word-signal file is empty", DataWarning, stacklevel=2)
        return empty_dataset()

    reader = csv.reader(io.StringIO("\n".join(lines[body_start:])), delimiter="\t")
    header = next(reader)
    if tuple(header[: len(KEY_COLUMNS)]) != KEY_COLUMNS:
        raise ParseError(body_start + 1, f"header must start with {', '.join(KEY_COLUMNS)}")
    signal_cols = header[len(KEY_COLUMNS) :]
    for name in signal_cols:
        if name not in SIGNALS:
            raise UnknownSignalError(f"line {body_start + 1}: unknown signal column {name!r}")
    if len(set(signal_cols)) != len(signal_cols):
        raise ParseError(body_start + 1, "repeated signal column")
    signals = canonical_order(signal_cols)
    col_of = [signals.index(c) for c in signal_cols]

    tokens: dict[tuple[str, int], Token] = {}
    sentence_order: list[str] = []
    participant_order: list[str] = []
    seen_participants: set[str] = set()
    cells: dict[tuple[str, int, str], list[float]] = {}
    for row_no, row in enumerate(reader, start=body_start + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(row_no, f"expected {len(header)} fields, found {len(row)}")
        sid, widx, pid, word, pos = (c.strip() for c in row[: len(KEY_COLUMNS)])
        try:
            w = int(widx)
        except ValueError:
            raise ParseError(row_no, f"word_index {widx!r} is not an integer") from None
        if w < 0:
            raise ParseError(row_no, "word_index must be non-negative")
        if not pos:
            raise ParseError(row_no, "missing POS tag")
        vals = [math.nan] * len(signals)
        for c, cell in zip(col_of, row[len(KEY_COLUMNS) :]):
            vals[c] = _parse_value(cell, row_no, signals[c])
        key = (sid, w, pid)
        if key in cells:
            dup_sig = next((s for s, v in zip(signals, vals) if not math.isnan(v)), signals[0] if signals else "")
            raise DuplicateKeyError((sid, w, pid, dup_sig))
        cells[key] = vals
        tok = tokens.get((sid, w))
        if tok is None:
            tokens[(sid, w)] = Token(word, pos)
            if sid not in sentence_order:
                sentence_order.append(sid)
        elif tok.text != word or tok.pos != pos:
            raise ParseError(row_no, f"word/pos for sentence {sid} word {w} disagree with an earlier row")
        if pid not in seen_participants:
            seen_participants.add(pid)
            participant_order.append(pid)

    sentences = []
    for sid in sentence_order:
        idxs = sorted(w for (s, w) in tokens if s == sid)
        if idxs != list(range(len(idxs))):
            raise DataError(f"sentence {sid}: word indices must be contiguous from 0, got {idxs}")
        sentences.append(Sentence(sid, [tokens[(sid, w)] for w in idxs]))

    if not sentences:
        warnings.warn("word-signal file has no data rows", DataWarning, stacklevel=2)
        return empty_dataset(signals)

    n_tokens = sum(len(s) for s in sentences)
    values = np.full((len(participant_order), n_tokens, len(signals)), np.nan)
    offset = {}
    pos_ = 0
    for s in sentences:
        offset[s.id] = pos_
        pos_ += len(s)
    p_index = {p: i for i, p in enumerate(participant_order)}
    for (sid, w, pid), vals in cells.items():
        values[p_index[pid], offset[sid] + w] = vals
    return WordSignalDataset(sentences, participant_order, signals, values)


def load_word_signals(path: str | Path) -> WordSignalDataset:
    return read_word_signals(Path(path).read_text(encoding="utf-8"))


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def format_word_signals(ds: WordSignalDataset) -> str:
    buf = io.StringIO()
    buf.write(FORMAT_TAG + "\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(list(KEY_COLUMNS) + list(ds.signals))
    for s_idx, sent in enumerate(ds.sentences):
        for w, tok in enumerate(sent.tokens):
            n = ds.offsets[s_idx] + w
            for p_idx, pid in enumerate(ds.participants):
                writer.writerow([sent.id, w, pid, tok.text, tok.pos] + [_fmt(v) for v in ds.values[p_idx, n]])
    return buf.getvalue()


def write_word_signals(ds: WordSignalDataset, path: str | Path) -> None:
    Path(path).write_text(format_word_signals(ds), encoding="utf-8")


# ---- transforms ----------------------------------------------------------------

def log_transform(values, labels: Sequence | None = None) -> np.ndarray:
    """Natural log, elementwise. NaN (missing) passes through."""
    arr = np.asarray(values, dtype=np.float64)
    bad = ~np.isnan(arr) & (arr <= 0)
    if bad.any():
        where = np.argwhere(bad)
        records = [labels[tuple(i)] if labels is not None else tuple(int(x) for x in i) for i in where]
        raise NonPositiveValueError(records)
    with np.errstate(invalid="ignore"):
        return np.log(arr)


def modulus_transform(x, lam: float):
    """John-Draper modulus transform; odd in x, continuous in lambda at 0."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    if lam == 0.0:
        out = np.sign(x) * np.log1p(a)
    elif abs(lam) < 1e-3:
        # the power form cancels badly as lambda -> 0
        out = np.sign(x) * np.expm1(lam * np.log1p(a)) / lam
    else:
        out = np.sign(x) * (np.power(a + 1.0, lam) - 1.0) / lam
    return out if out.ndim else float(out)


def transformed_values(ds: WordSignalDataset) -> np.ndarray:
    """Value cube with durations log-transformed; ERP columns untouched."""
    out = ds.values.copy()
    for k, sig in enumerate(ds.signals):
        if descriptor(sig).is_duration:
            part = out[..., k]
            bad = ~np.isnan(part) & (part <= 0)
            if bad.any():
                sent_of = ds.token_sentence_index()
                records = [
                    (ds.sentences[sent_of[n]].id, int(n - ds.offsets[sent_of[n]]), ds.participants[p], sig)
                    for p, n in np.argwhere(bad)
                ]
                raise NonPositiveValueError(records)
            out[..., k] = log_transform(part)
    return out


# ---- standardization ----------------------------------------------------------

@dataclass
class StandardizationStats:
    participant_mean: np.ndarray  # (P, S)
    participant_std: np.ndarray  # (P, S)
    included: np.ndarray  # (P, S) bool
    average_mean: np.ndarray  # (S,)
    average_std: np.ndarray  # (S,)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}


def _guarded_std(std: np.ndarray, label: str) -> np.ndarray:
    std = np.array(std, dtype=np.float64)
    bad = ~(std > 0)
    if bad.any():
        warnings.warn(f"{label}: zero standard deviation replaced by 1", DataWarning, stacklevel=3)
        std[bad] = 1.0
    return std


def fit_standardization(
    values: np.ndarray, train_mask: np.ndarray, signals: Sequence[str] | None = None
) -> StandardizationStats:
    """Fit the two-stage standardization on the tokens selected by ``train_mask``."""
    P, N, S = values.shape
    train = values[:, np.asarray(train_mask, bool), :]
    counts = (~np.isnan(train)).sum(axis=1)
    included = counts >= 2
    names = list(signals) if signals is not None else [str(k) for k in range(S)]
    for p, k in np.argwhere(~included):
        warnings.warn(
            f"participant #{p} has {counts[p, k]} training observations of {names[k]}; excluded",
            DataWarning,
            stacklevel=2,
        )
    with warnings.catch_warnings(), np.errstate(invalid="ignore", divide="ignore"):
        warnings.simplefilter("ignore", RuntimeWarning)
        pmean = np.where(included, np.nanmean(train, axis=1), 0.0)
        pstd = np.where(included, np.nanstd(train, axis=1), 1.0)
    pstd = _guarded_std(pstd, "participant-level standardization")
    stats = StandardizationStats(pmean, pstd, included, np.zeros(S), np.ones(S))
    avg = _participant_average(values, stats)[np.asarray(train_mask, bool)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        amean = np.nanmean(avg, axis=0) if avg.size else np.zeros(S)
        astd = np.nanstd(avg, axis=0) if avg.size else np.ones(S)
    stats.average_mean = np.nan_to_num(amean)
    stats.average_std = _guarded_std(np.nan_to_num(astd), "post-average standardization")
    return stats


def _participant_average(values: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    z = (values - stats.participant_mean[:, None, :]) / stats.participant_std[:, None, :]
    z = np.where(stats.included[:, None, :], z, np.nan)
    present = ~np.isnan(z)
    n = present.sum(axis=0)
    total = np.where(present, z, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def apply_standardization(values: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    avg = _participant_average(values, stats)
    return (avg - stats.average_mean) / stats.average_std


def standardize_and_average(
    values: np.ndarray, train_mask: np.ndarray, signals: Sequence[str] | None = None
) -> tuple[np.ndarray, StandardizationStats]:
    """Per-participant z-score, missing-aware participant mean, second z-score.

    Both stages use statistics from the ``train_mask`` tokens only; every
    token (training or not) is transformed with them. Returns the (tokens,
    signals) series and the fitted statistics.
    """
    stats = fit_standardization(values, train_mask, signals)
    return apply_standardization(values, stats), stats


# ---- splits ----------------------------------------------------------------------

TEST_FRACTION = 0.1


@dataclass(frozen=True)
class SplitSpec:
    run_index: int
    master_seed: int
    test_ids: tuple[str, ...]
    train_ids: tuple[str, ...]

    @property
    def hash(self) -> str:
        blob = json.dumps({"test": list(self.test_ids), "train": list(self.train_ids)}, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "run_index": self.run_index,
            "master_seed": self.master_seed,
            "test_ids": list(self.test_ids),
            "train_ids": list(self.train_ids),
            "hash": self.hash,
        }


def split_rng(master_seed: int, run_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(run_index), 0x5B11]))


def make_split(master_seed: int, run_index: int, sentence_ids: Sequence[str]) -> SplitSpec:
    """Random 10% (floor) of sentences held out; a pure function of (seed, run)."""
    ids = sorted(set(str(s) for s in sentence_ids))
    if len(ids) != len(sentence_ids):
        raise DataError("sentence ids must be unique")
    if len(ids) < 10:
        raise DataError(f"need at least 10 sentences to split, got {len(ids)}")
    n_test = int(math.floor(TEST_FRACTION * len(ids)))
    perm = split_rng(master_seed, run_index).permutation(len(ids))
    test = tuple(sorted(ids[i] for i in perm[:n_test]))
    train = tuple(sorted(ids[i] for i in perm[n_test:]))
    return SplitSpec(int(run_index), int(master_seed), test, train)
