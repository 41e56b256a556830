"""Word embeddings, stacked LSTM encoders and the next/previous-word LM head.

Each direction owns a full parameter set under a ``fwd.`` or ``bwd.``
prefix: an embedding matrix, ``layers`` LSTM layers (the last one
projecting to ``output_dim``) and a linear-softmax LM head. Gates are
packed in ``i, f, o, g`` order.

Regularization follows the AWD-LSTM recipe: whole-word embedding
dropout, per-sequence (variational) masks on layer inputs, between
layers and on the output, and DropConnect on hidden-to-hidden weights.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor

VARIANTS = ("bidirectional", "forward-only", "embeddings-only")
DIRECTIONS = {"forward": "fwd", "backward": "bwd"}


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    embedding_dim: int = 400
    hidden_dim: int = 1150
    output_dim: int = 400
    layers: int = 3
    variant: str = "bidirectional"
    dropout_embedding: float = 0.05
    dropout_input: float = 0.4
    dropout_hidden: float = 0.4
    dropout_output: float = 0.5
    weight_drop: float = 0.5

    def __post_init__(self):
        for name in ("embedding_dim", "hidden_dim", "output_dim", "layers"):
            if getattr(self, name) <= 0:
                raise EncoderError(f"{name} must be positive")
        for name in ("dropout_embedding", "dropout_input", "dropout_hidden", "dropout_output", "weight_drop"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise EncoderError(f"{name} must lie in [0, 1), got {p}")
        if self.variant not in VARIANTS:
            raise EncoderError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def context_width(self) -> int:
        if self.variant == "bidirectional":
            return 2 * self.output_dim
        if self.variant == "forward-only":
            return self.output_dim
        return self.embedding_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        for layer in range(self.layers):
            d_in = self.embedding_dim if layer == 0 else self.hidden_dim
            d_out = self.output_dim if layer == self.layers - 1 else self.hidden_dim
            dims.append((d_in, d_out))
        return dims

    def without_dropout(self) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), **dict.fromkeys(
            ("dropout_embedding", "dropout_input", "dropout_hidden", "dropout_output", "weight_drop"), 0.0)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class Vocabulary:
    UNK = "<unk>"

    def __init__(self, tokens: Sequence[str], counts: Sequence[int] | None = None):
        if not tokens or tokens[0] != self.UNK:
            raise EncoderError("vocabulary must start with the unknown token")
        if len(set(tokens)) != len(tokens):
            raise EncoderError("duplicate vocabulary entries")
        self.tokens = list(tokens)
        self.counts = list(counts) if counts is not None else [1] * len(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        total = sum(self.counts) + len(self.counts)
        self._log_unigram = np.log((np.asarray(self.counts, dtype=np.float64) + 1.0) / total)

    unk_id = 0

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for s in sentences for w in s)
        kept = sorted(w for w, c in counts.items() if c >= min_count and w != cls.UNK)
        return cls([cls.UNK] + kept, [0] + [counts[w] for w in kept])

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(w, self.unk_id) for w in words], dtype=np.int64)

    def log_unigram(self, ids) -> np.ndarray:
        return self._log_unigram[np.asarray(ids, dtype=np.int64)]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["counts"])


def init_params(config: EncoderConfig, vocab_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform +-1/sqrt(fan_in) initialization for both directions."""
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for prefix in ("fwd", "bwd"):
        params[f"{prefix}.embedding"] = uniform((vocab_size, config.embedding_dim), config.embedding_dim)
        for layer, (d_in, d_out) in enumerate(config.layer_dims()):
            params[f"{prefix}.lstm{layer}.w_ih"] = uniform((d_in, 4 * d_out), d_out)
            params[f"{prefix}.lstm{layer}.w_hh"] = uniform((d_out, 4 * d_out), d_out)
            params[f"{prefix}.lstm{layer}.bias"] = uniform((4 * d_out,), d_out)
        params[f"{prefix}.lm.weight"] = uniform((config.output_dim, vocab_size), config.output_dim)
        params[f"{prefix}.lm.bias"] = np.zeros(vocab_size)
    return params


def final_layer_names(config: EncoderConfig) -> list[str]:
    last = config.layers - 1
    return [f"{p}.lstm{last}.{w}" for p in ("fwd", "bwd") for w in ("w_ih", "w_hh", "bias")]


def pad_batch(sequences: Sequence[np.ndarray], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    ids = np.full((len(sequences), int(lengths.max(initial=0))), pad_id, dtype=np.int64)
    for b, s in enumerate(sequences):
        ids[b, : len(s)] = s
    return ids, lengths


def _lstm_layer_const(x, w_ih, w_hh, bias, lengths, reverse) -> np.ndarray:
    """Same arithmetic as the taped path, for layers nothing differentiates through."""
    B, T, _ = x.shape
    H = w_hh.shape[0]
    xp = ad._matmul_fwd(x, w_ih) + bias
    out = np.empty((B, T, H), dtype=xp.dtype)
    valid = (np.arange(T)[None, :] < lengths[:, None]).astype(x.dtype)[:, :, None] if reverse else None
    h = c = None
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        z = xp[:, t : t + 1]
        if h is not None:
            z = z + ad._matmul_fwd(h, w_hh)
        sg = ad._sigmoid_fwd(z[..., : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        i, f, o = sg[..., :H], sg[..., H : 2 * H], sg[..., 2 * H :]
        c = i * g if c is None else f * c + i * g
        h = o * np.tanh(c)
        if valid is not None and (lengths <= t).any():
            m = valid[:, t : t + 1]
            c = c * m
            h = h * m
        out[:, t : t + 1] = h
    return out


def _lstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, lengths: np.ndarray, reverse: bool) -> Tensor:
    if not (x.requires_grad or w_ih.requires_grad or w_hh.requires_grad or bias.requires_grad):
        return Tensor(_lstm_layer_const(x.data, w_ih.data, w_hh.data, bias.data, lengths, reverse))
    B, T, _ = x.shape
    H = w_hh.shape[0]
    xp = ad.add(ad.matmul(x, w_ih), bias)
    step_masks = None
    if reverse:
        valid = (np.arange(T)[None, :] < lengths[:, None]).astype(x.dtype)
        step_masks = valid[:, :, None]
    gate_sig = (Ellipsis, slice(0, 3 * H))
    gate_cand = (Ellipsis, slice(3 * H, 4 * H))
    i_idx, f_idx, o_idx = ((Ellipsis, slice(k * H, (k + 1) * H)) for k in range(3))

    outs: list[Tensor | None] = [None] * T
    h = c = None
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = ad.slice_(xp, (slice(None), slice(t, t + 1)))
        if h is not None:
            z = ad.add(z, ad.matmul(h, w_hh))
        sg = ad.sigmoid(ad.slice_(z, gate_sig))
        g = ad.tanh(ad.slice_(z, gate_cand))
        i, f, o = ad.slice_(sg, i_idx), ad.slice_(sg, f_idx), ad.slice_(sg, o_idx)
        c = ad.multiply(i, g) if c is None else ad.add(ad.multiply(f, c), ad.multiply(i, g))
        h = ad.multiply(o, ad.tanh(c))
        if step_masks is not None and (lengths <= t).any():
            # padded steps keep the state at zero so each sequence starts fresh
            m = Tensor(step_masks[:, t : t + 1])
            c = ad.multiply(c, m)
            h = ad.multiply(h, m)
        outs[t] = h
    return ad.concat(outs, axis=1)


class SequenceEncoder:
    """Both LM directions over a shared vocabulary."""

    def __init__(
        self,
        config: EncoderConfig,
        vocab: Vocabulary,
        params: ParameterSet | dict[str, np.ndarray] | None = None,
        seed: int = 0,
        dtype=ad.DEFAULT_DTYPE,
    ):
        self.config = config
        self.vocab = vocab
        if params is None:
            params = init_params(config, vocab.size, np.random.default_rng(seed))
        self.params = params if isinstance(params, ParameterSet) else ParameterSet(params, dtype=dtype)
        missing = set(init_params_shapes(config, vocab.size)) - set(self.params.names())
        if missing:
            raise EncoderError(f"missing encoder parameters: {sorted(missing)}")

    # -- building blocks ------------------------------------------------

    def _prefix(self, direction: str) -> str:
        try:
            return DIRECTIONS[direction]
        except KeyError:
            raise EncoderError(f"direction must be 'forward' or 'backward', got {direction!r}") from None

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab.size):
            raise EncoderError("token id outside the vocabulary; map unknown words to the unknown token first")

    def embed_batch(
        self, ids: np.ndarray, direction: str = "forward", training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        emb = self.params[f"{self._prefix(direction)}.embedding"]
        p = self.config.dropout_embedding
        if training and p > 0:
            emb = ad.dropout(emb, ad.dropout_mask(rng, (emb.shape[0], 1), p, emb.dtype))
        return ad.take(emb, ids)

    def embed(self, ids, direction: str = "forward", training: bool = False, rng=None) -> Tensor:
        """Embeddings of one sentence, shape (len, embedding_dim)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return Tensor(np.zeros((0, self.config.embedding_dim), dtype=self.params.dtype))
        return ad.slice_(self.embed_batch(ids[None], direction, training, rng), (0,))

    def run_batch(
        self,
        ids: np.ndarray,
        lengths: np.ndarray,
        direction: str,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Final-layer outputs of one direction, shape (batch, time, output_dim)."""
        cfg = self.config
        if training and rng is None:
            raise EncoderError("training mode needs a random generator for dropout masks")
        pre = self._prefix(direction)
        B = ids.shape[0]
        x = self.embed_batch(ids, direction, training, rng)
        if training and cfg.dropout_input > 0:
            x = ad.dropout(x, ad.dropout_mask(rng, (B, 1, x.shape[-1]), cfg.dropout_input, x.dtype))
        for layer in range(cfg.layers):
            w_hh = self.params[f"{pre}.lstm{layer}.w_hh"]
            if training and cfg.weight_drop > 0:
                w_hh = ad.dropout(w_hh, ad.dropout_mask(rng, w_hh.shape, cfg.weight_drop, w_hh.dtype))
            x = _lstm_layer(
                x,
                self.params[f"{pre}.lstm{layer}.w_ih"],
                w_hh,
                self.params[f"{pre}.lstm{layer}.bias"],
                lengths,
                reverse=direction == "backward",
            )
            last = layer == cfg.layers - 1
            p = cfg.dropout_output if last else cfg.dropout_hidden
            if training and p > 0:
                x = ad.dropout(x, ad.dropout_mask(rng, (B, 1, x.shape[-1]), p, x.dtype))
        return x

    def encode(self, ids, direction: str = "forward", training: bool = False, rng=None) -> Tensor:
        """Context embeddings of one non-empty sentence, shape (len, output_dim)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise EncoderError("cannot encode an empty sequence")
        out = self.run_batch(ids[None], np.array([ids.size]), direction, training, rng)
        return ad.slice_(out, (0,))

    # -- language modelling ---------------------------------------------

    def lm_logits(self, hidden: Tensor, direction: str) -> Tensor:
        pre = self._prefix(direction)
        return ad.add(ad.matmul(hidden, self.params[f"{pre}.lm.weight"]), self.params[f"{pre}.lm.bias"])

    def lm_loss(
        self,
        sentences: Sequence[np.ndarray],
        direction: str = "forward",
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Mean NLL of the next (forward) or previous (backward) token."""
        if len(sentences) == 0:
            raise EncoderError("empty LM batch")
        if any(len(s) < 2 for s in sentences):
            raise EncoderError("LM sentences need at least two tokens")
        ids, lengths = pad_batch(sentences)
        hidden = self.run_batch(ids, lengths, direction, training, rng)
        T = ids.shape[1]
        if direction == "forward":
            h = ad.slice_(hidden, (slice(None), slice(0, T - 1)))
            targets = ids[:, 1:]
            weights = np.arange(1, T)[None, :] < lengths[:, None]
        else:
            h = ad.slice_(hidden, (slice(None), slice(1, T)))
            targets = ids[:, : T - 1]
            weights = np.arange(1, T)[None, :] < lengths[:, None]
        return ad.nll(self.lm_logits(h, direction), targets, weights)

    def word_log_probs(self, ids: np.ndarray) -> np.ndarray:
        """Log-probability of each word from the forward LM (eval mode).

        The first word has no left context and gets its smoothed unigram
        log-frequency instead.
        """
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty(ids.size, dtype=np.float64)
        if ids.size == 0:
            return out
        out[0] = self.vocab.log_unigram(ids[:1])[0]
        if ids.size > 1:
            hidden = self.encode(ids, "forward")
            logits = self.lm_logits(hidden, "forward").data.astype(np.float64)[:-1]
            z = logits - logits.max(axis=-1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            out[1:] = lp[np.arange(ids.size - 1), ids[1:]]
        return out

    def batch_log_probs(self, sentences: Sequence[np.ndarray], batch_size: int = 64) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            ids, lengths = pad_batch(chunk)
            hidden = self.run_batch(ids, lengths, "forward")
            logits = self.lm_logits(hidden, "forward").data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            for b, s in enumerate(chunk):
                row = np.empty(len(s))
                row[0] = self.vocab.log_unigram(s[:1])[0]
                if len(s) > 1:
                    row[1:] = lp[b, np.arange(len(s) - 1), s[1:]]
                out.append(row)
        return out

    # -- persistence ----------------------------------------------------

    def meta(self) -> dict:
        return {"encoder": self.config.to_dict(), "vocab": self.vocab.to_dict()}

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, np.ndarray], meta: dict, dtype=ad.DEFAULT_DTYPE) -> "SequenceEncoder":
        config = EncoderConfig.from_dict(meta["encoder"])
        vocab = Vocabulary.from_dict(meta["vocab"])
        names = init_params_shapes(config, vocab.size)
        return cls(config, vocab, {n: tensors[n] for n in names}, dtype=dtype)


def init_params_shapes(config: EncoderConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for prefix in ("fwd", "bwd"):
        shapes[f"{prefix}.embedding"] = (vocab_size, config.embedding_dim)
        for layer, (d_in, d_out) in enumerate(config.layer_dims()):
            shapes[f"{prefix}.lstm{layer}.w_ih"] = (d_in, 4 * d_out)
            shapes[f"{prefix}.lstm{layer}.w_hh"] = (d_out, 4 * d_out)
            shapes[f"{prefix}.lstm{layer}.bias"] = (4 * d_out,)
        shapes[f"{prefix}.lm.weight"] = (config.output_dim, vocab_size)
        shapes[f"{prefix}.lm.bias"] = (vocab_size,)
    return shapes


ContextProvider = Callable[..., Tensor]


def select_variant(config: EncoderConfig) -> ContextProvider:
    """Return ``provider(encoder, ids, lengths, training=False, rng=None) -> (batch, time, width)``."""

    def bidirectional(enc, ids, lengths, training=False, rng=None):
        fwd = enc.run_batch(ids, lengths, "forward", training, rng)
        bwd = enc.run_batch(ids, lengths, "backward", training, rng)
        return ad.concat([fwd, bwd], axis=-1)

    def forward_only(enc, ids, lengths, training=False, rng=None):
        return enc.run_batch(ids, lengths, "forward", training, rng)

    def embeddings_only(enc, ids, lengths, training=False, rng=None):
        return enc.embed_batch(ids, "forward", training, rng)

    providers = {
        "bidirectional": bidirectional,
        "forward-only": forward_only,
        "embeddings-only": embeddings_only,
    }
    try:
        return providers[config.variant]
    except KeyError:
        raise EncoderError(f"unknown variant {config.variant!r}") from None


def variant_param_names(config: EncoderConfig) -> list[str]:
    """Encoder parameters that actually feed the decoder under a variant."""
    names = []
    prefixes = ("fwd", "bwd") if config.variant == "bidirectional" else ("fwd",)
    for prefix in prefixes:
        names.append(f"{prefix}.embedding")
        if config.variant != "embeddings-only":
            for layer in range(config.layers):
                names += [f"{prefix}.lstm{layer}.{w}" for w in ("w_ih", "w_hh", "bias")]
    return names
