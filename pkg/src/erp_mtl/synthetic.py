"""Synthetic word-signal datasets with a known linear ground truth.

Sentences come from a sparse first-order Markov chain over a small
vocabulary, so a language model has something to learn. Every word type
carries a latent vector ``z``; the feature of position ``t`` is
``z[w_t] + prev_weight * z[w_{t-1}]``. Each signal is a fixed linear
readout of that feature (the *loadings* matrix decides which signals
share latent factors), rescaled to unit variance over content words,
plus a per-participant offset and Gaussian noise.

``coverage`` optionally restricts a signal to a band of sentences: every
sentence draws one uniform number ``u`` and a signal with band
``[lo, hi)`` is recorded only where ``lo <= u < hi``. Disjoint bands give
signals recorded on disjoint sentence sets, as when measures come from
separate experiments.

``noise_std`` is the noise left after averaging participants, so the
best achievable proportion of variance explained on the averaged series
is ``1 / (1 + noise_std**2)``. Each participant receives noise with
standard deviation ``noise_std * sqrt(n_participants)``.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Sentence, Token, WordSignalDataset, write_word_signals
from .signals import ALL_SIGNALS, canonical_order, descriptor

MANIFEST_FORMAT = "erp-mtl synthetic-manifest v1"
CONFIG_FORMAT = "erp-mtl synthetic-config v1"

_CONTENT_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "PRON", "AUX", "PROPN")
_FUNCTION_TAGS = ("DET", "ADP", "CCONJ", "PART")

# durations are generated on the log scale around these centres
_DURATION_BASE_MS = {"eye": 230.0, "reading": 350.0}
_DURATION_LOG_SCALE = 0.25


class GeneratorConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    seed: int = 0
    vocab_size: int = 40
    content_fraction: float = 0.6
    n_sentences: int = 200
    min_length: int = 6
    max_length: int = 12
    n_participants: int = 8
    latent_dim: int = 4
    prev_weight: float = 0.5
    signals: tuple[str, ...] = ALL_SIGNALS
    noise_std: float | dict[str, float] = 0.5
    loadings: dict[str, list[float]] | None = None
    participant_offset_std: float = 0.5
    missing_rate: float = 0.0
    successors: int = 4
    lm_sentences: int = 1000
    coverage: dict[str, list[float]] | None = None

    def __post_init__(self):
        self.signals = tuple(self.signals)
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise GeneratorConfigError("vocab_size must be at least 2")
        if not 0.0 < self.content_fraction <= 1.0:
            raise GeneratorConfigError("content_fraction must lie in (0, 1]")
        if self.n_sentences < 1 or self.lm_sentences < 0:
            raise GeneratorConfigError("sentence counts must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise GeneratorConfigError("need 1 <= min_length <= max_length")
        if self.n_participants < 1 or self.latent_dim < 1:
            raise GeneratorConfigError("n_participants and latent_dim must be positive")
        if not 0.0 <= self.missing_rate < 1.0:
            raise GeneratorConfigError("missing_rate must lie in [0, 1)")
        if not 1 <= self.successors <= self.vocab_size:
            raise GeneratorConfigError("successors must lie in [1, vocab_size]")
        if not self.signals:
            raise GeneratorConfigError("at least one signal is required")
        try:
            canonical_order(self.signals)
        except KeyError as exc:
            raise GeneratorConfigError(str(exc)) from None
        for s in self.signals:
            if self.noise_for(s) < 0:
                raise GeneratorConfigError(f"noise_std for {s} must be non-negative")
        if self.loadings is not None:
            for s in self.signals:
                row = self.loadings.get(s)
                if row is None or len(row) != self.latent_dim:
                    raise GeneratorConfigError(f"loadings for {s} must have {self.latent_dim} entries")
                if not any(row):
                    raise GeneratorConfigError(f"loadings for {s} are all zero")

        for s, band in (self.coverage or {}).items():
            if s not in self.signals:
                raise GeneratorConfigError(f"coverage given for {s}, which is not generated")
            if len(band) != 2 or not 0.0 <= band[0] < band[1] <= 1.0:
                raise GeneratorConfigError(f"coverage band for {s} must be [lo, hi) with 0 <= lo < hi <= 1")

    def noise_for(self, signal: str) -> float:
        if isinstance(self.noise_std, dict):
            if signal not in self.noise_std:
                raise GeneratorConfigError(f"no noise_std given for {signal}")
            return float(self.noise_std[signal])
        return float(self.noise_std)

    def ceilings(self) -> dict[str, float]:
        return {s: 1.0 / (1.0 + self.noise_for(s) ** 2) for s in self.signals}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signals"] = list(self.signals)
        return {"format": CONFIG_FORMAT, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = {k: v for k, v in d.items() if k != "format"}
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise GeneratorConfigError(f"unknown generator settings: {sorted(extra)}")
        return cls(**d)


@dataclass
class SyntheticData:
    config: GeneratorConfig
    dataset: WordSignalDataset
    corpus: list[list[str]]
    ceilings: dict[str, float]
    clean: np.ndarray  # (tokens, signals) noiseless unit-variance signal
    latents: np.ndarray  # (vocab, latent_dim)
    loadings: np.ndarray  # (signals, latent_dim)
    extras: dict = field(default_factory=dict)


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words: list[str] = []
    seen = set()
    while len(words) < n:
        length = int(rng.integers(2, 10))
        w = "".join(rng.choice(letters, size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _markov_chain(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    V = cfg.vocab_size
    trans = np.zeros((V, V))
    for v in range(V):
        nxt = rng.choice(V, size=cfg.successors, replace=False)
        trans[v, nxt] = rng.dirichlet(np.ones(cfg.successors))
    return trans


def _sample_sentences(rng, trans, n, cfg) -> list[np.ndarray]:
    V = trans.shape[0]
    out = []
    for _ in range(n):
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        seq = np.empty(length, dtype=np.int64)
        seq[0] = rng.integers(V)
        for t in range(1, length):
            seq[t] = rng.choice(V, p=trans[seq[t - 1]])
        out.append(seq)
    return out


def generate_synthetic(cfg: GeneratorConfig) -> SyntheticData:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    signals = canonical_order(cfg.signals)
    V, S, P, d = cfg.vocab_size, len(signals), cfg.n_participants, cfg.latent_dim

    words = _make_words(rng, V)
    n_content = max(1, int(round(cfg.content_fraction * V)))
    is_content = np.zeros(V, bool)
    is_content[rng.permutation(V)[:n_content]] = True
    tags = [
        str(rng.choice(_CONTENT_TAGS)) if is_content[v] else str(rng.choice(_FUNCTION_TAGS)) for v in range(V)
    ]
    trans = _markov_chain(rng, cfg)
    latents = rng.standard_normal((V, d))
    if cfg.loadings is None:
        loadings = rng.standard_normal((S, d))
    else:
        loadings = np.array([cfg.loadings[s] for s in signals], dtype=np.float64)

    seqs = _sample_sentences(rng, trans, cfg.n_sentences, cfg)
    lm_seqs = _sample_sentences(rng, trans, cfg.lm_sentences, cfg)

    feats = []
    for seq in seqs:
        z = latents[seq]
        prev = np.vstack([np.zeros((1, d)), z[:-1]])
        feats.append(z + cfg.prev_weight * prev)
    feat = np.vstack(feats)
    raw = feat @ loadings.T  # (N, S)
    content = np.concatenate([is_content[s] for s in seqs])
    basis = raw[content] if content.any() else raw
    mu = basis.mean(axis=0)
    sd = basis.std(axis=0)
    sd[sd <= 0] = 1.0
    clean = (raw - mu) / sd

    N = clean.shape[0]
    offsets = rng.normal(0.0, cfg.participant_offset_std, size=(P, S))
    noise_sd = np.array([cfg.noise_for(s) for s in signals]) * math.sqrt(P)
    noise = rng.standard_normal((P, N, S)) * noise_sd
    latent_values = clean[None] + offsets[:, None, :] + noise
    values = np.empty_like(latent_values)
    for k, s in enumerate(signals):
        desc = descriptor(s)
        if desc.is_duration:
            base = math.log(_DURATION_BASE_MS[desc.kind])
            values[..., k] = np.exp(base + _DURATION_LOG_SCALE * latent_values[..., k])
        else:
            values[..., k] = latent_values[..., k]
    if cfg.missing_rate > 0:
        values[rng.random(values.shape) < cfg.missing_rate] = np.nan
    if cfg.coverage:
        # separate stream so adding coverage leaves every other draw unchanged
        u = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0E])).random(len(seqs))
        u_tok = np.repeat(u, [len(q) for q in seqs])
        for s, (lo, hi) in cfg.coverage.items():
            values[:, ~((u_tok >= lo) & (u_tok < hi)), signals.index(s)] = np.nan

    sentences = [
        Sentence(f"s{i:04d}", [Token(words[v], tags[v]) for v in seq]) for i, seq in enumerate(seqs)
    ]
    participants = [f"p{j:02d}" for j in range(P)]
    ds = WordSignalDataset(sentences, participants, signals, values)
    corpus = [[words[v] for v in seq] for seq in lm_seqs]
    return SyntheticData(
        config=cfg,
        dataset=ds,
        corpus=corpus,
        ceilings={s: 1.0 / (1.0 + cfg.noise_for(s) ** 2) for s in signals},
        clean=clean,
        latents=latents,
        loadings=loadings,
    )


def write_synthetic(data: SyntheticData, out_dir: str | Path) -> dict[str, Path]:
    """Write words.tsv, corpus.txt, generator.json and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "words": out / "words.tsv",
        "corpus": out / "corpus.txt",
        "config": out / "generator.json",
        "manifest": out / "manifest.json",
    }
    write_word_signals(data.dataset, paths["words"])
    paths["corpus"].write_text("".join(" ".join(s) + "\n" for s in data.corpus), encoding="utf-8")
    paths["config"].write_text(json.dumps(data.config.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "format": MANIFEST_FORMAT,
        "ceilings": data.ceilings,
        "signals": list(data.dataset.signals),
        "sentences": len(data.dataset.sentences),
        "tokens": data.dataset.n_tokens,
        "participants": len(data.dataset.participants),
        "lm_sentences": len(data.corpus),
        "loadings": {s: data.loadings[k].tolist() for k, s in enumerate(data.dataset.signals)},
        "files": {k: p.name for k, p in paths.items() if k != "manifest"},
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_corpus(path: str | Path) -> list[list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.split() for ln in lines if ln.strip() and not ln.startswith("#")]
