"""Causal pair-embedding and independent per-signal linear heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .signals import ALL_SIGNALS, descriptor


class DecoderError(ValueError):
    pass


class MissingHeadError(DecoderError, KeyError):
    pass


SIDE_INPUTS = ("word_length", "log_prob")


@dataclass(frozen=True)
class DecoderConfig:
    pair_dim: int = 10
    signal_names: tuple[str, ...] = ALL_SIGNALS
    input_width: int = 800

    def __post_init__(self):
        object.__setattr__(self, "signal_names", tuple(self.signal_names))
        if self.pair_dim <= 0 or self.input_width <= 0:
            raise DecoderError("pair_dim and input_width must be positive")
        if not self.signal_names:
            raise DecoderError("at least one signal is required")
        if len(set(self.signal_names)) != len(self.signal_names):
            raise DecoderError("signal names must be unique")
        for name in self.signal_names:
            descriptor(name)

    def to_dict(self) -> dict:
        return {"pair_dim": self.pair_dim, "signal_names": list(self.signal_names), "input_width": self.input_width}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(d["pair_dim"], tuple(d["signal_names"]), d["input_width"])


def head_names(signal: str) -> tuple[str, str]:
    return f"dec.head.{signal}.weight", f"dec.head.{signal}.bias"


def init_params(config: DecoderConfig, rng: np.random.Generator, signal_rngs=None) -> dict[str, np.ndarray]:
    """Kaiming-uniform initialization with bound 1/sqrt(fan_in), as torch's defaults give.

    ``signal_rngs`` may map a signal name to its own generator so a head's
    starting point does not depend on which other heads exist.
    """
    params = {}
    fan_conv = 2 * config.input_width
    b = 1.0 / math.sqrt(fan_conv)
    params["dec.conv.weight"] = rng.uniform(-b, b, size=(2, config.input_width, config.pair_dim))
    params["dec.conv.bias"] = rng.uniform(-b, b, size=(config.pair_dim,))
    fan_head = config.pair_dim + len(SIDE_INPUTS)
    bh = 1.0 / math.sqrt(fan_head)
    for s in config.signal_names:
        r = signal_rngs[s] if signal_rngs is not None else rng
        w, bias = head_names(s)
        params[w] = r.uniform(-bh, bh, size=(fan_head, 1))
        params[bias] = r.uniform(-bh, bh, size=(1,))
    return params


@dataclass
class SideInputScaling:
    """Affine standardization of (word length, log-prob), fitted on training words."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    std: np.ndarray = field(default_factory=lambda: np.ones(2))

    @classmethod
    def fit(cls, word_length: np.ndarray, log_prob: np.ndarray) -> "SideInputScaling":
        x = np.stack([np.asarray(word_length, float), np.asarray(log_prob, float)], axis=-1)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std <= 0] = 1.0
        return cls(mean, std)

    def apply(self, word_length: np.ndarray, log_prob: np.ndarray) -> np.ndarray:
        x = np.stack([np.asarray(word_length, float), np.asarray(log_prob, float)], axis=-1)
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SideInputScaling":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


class Decoder:
    def __init__(
        self,
        config: DecoderConfig,
        params: ParameterSet,
        scaling: SideInputScaling | None = None,
    ):
        self.config = config
        self.params = params
        self.scaling = scaling or SideInputScaling()

    def pair_embed(self, context: Tensor) -> Tensor:
        """ReLU of the width-2 causal convolution; (batch, time, width) -> (batch, time, pair_dim)."""
        if context.data.ndim == 2:
            raise DecoderError("pair_embed expects a batched (batch, time, width) input")
        if context.shape[1] == 0:
            raise DecoderError("cannot pair-embed an empty sequence")
        return ad.relu(ad.conv_causal(context, self.params["dec.conv.weight"], self.params["dec.conv.bias"]))

    def _check_signals(self, signals: Sequence[str] | None) -> tuple[str, ...]:
        if signals is None:
            return self.config.signal_names
        for s in signals:
            if s not in self.config.signal_names:
                raise MissingHeadError(f"no head configured for signal {s!r}")
        return tuple(signals)

    def side_features(self, word_length, log_prob, valid=None) -> np.ndarray:
        wl = np.asarray(word_length, float)
        lp = np.asarray(log_prob, float)
        check = np.ones(wl.shape, bool) if valid is None else np.asarray(valid, bool)
        if (wl[check] < 1).any():
            raise DecoderError("word length must be at least 1")
        if (lp[check] > 0).any():
            raise DecoderError("log-probability must be <= 0")
        return self.scaling.apply(wl, lp)

    def predict_stacked(
        self,
        pair: Tensor,
        word_length,
        log_prob,
        signals: Sequence[str] | None = None,
        valid=None,
    ) -> Tensor:
        """Predictions of shape (batch, time, n_signals) in ``signals`` order."""
        signals = self._check_signals(signals)
        side = Tensor(self.side_features(word_length, log_prob, valid).astype(pair.dtype))
        features = ad.concat([pair, side], axis=-1)
        w = ad.concat([self.params[head_names(s)[0]] for s in signals], axis=1)
        b = ad.concat([self.params[head_names(s)[1]] for s in signals], axis=0)
        return ad.add(ad.matmul(features, w), b)

    def predict(self, pair: Tensor, word_length, log_prob, signals: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        signals = self._check_signals(signals)
        out = self.predict_stacked(pair, word_length, log_prob, signals).data
        return {s: out[..., k] for k, s in enumerate(signals)}
