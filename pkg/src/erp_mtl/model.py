"""Encoder + decoder composite sharing one parameter set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .decoder import Decoder, DecoderConfig, SideInputScaling
from .decoder import init_params as init_decoder_params
from .encoder import EncoderConfig, SequenceEncoder, Vocabulary, init_params_shapes, select_variant


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) token ids, padded with 0
    lengths: np.ndarray  # (B,)
    word_length: np.ndarray  # (B, T)
    log_prob: np.ndarray  # (B, T)
    content: np.ndarray  # (B, T) bool, False on padding
    targets: np.ndarray | None = None  # (B, T, S) with NaN for missing

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def make_batch(
    ids: Sequence[np.ndarray],
    word_length: Sequence[np.ndarray],
    log_prob: Sequence[np.ndarray],
    content: Sequence[np.ndarray],
    targets: Sequence[np.ndarray] | None = None,
) -> Batch:
    B = len(ids)
    lengths = np.array([len(s) for s in ids], dtype=np.int64)
    T = int(lengths.max())
    pid = np.zeros((B, T), np.int64)
    wl = np.ones((B, T))
    lp = np.zeros((B, T))
    cm = np.zeros((B, T), bool)
    tg = None
    if targets is not None:
        tg = np.full((B, T, targets[0].shape[-1]), np.nan)
    for b in range(B):
        n = lengths[b]
        pid[b, :n] = ids[b]
        wl[b, :n] = word_length[b]
        lp[b, :n] = log_prob[b]
        cm[b, :n] = content[b]
        if tg is not None:
            tg[b, :n] = targets[b]
    return Batch(pid, lengths, wl, lp, cm, tg)


class ErpModel:
    def __init__(
        self,
        encoder_config: EncoderConfig,
        vocab: Vocabulary,
        decoder_config: DecoderConfig,
        params: ParameterSet,
        scaling: SideInputScaling | None = None,
    ):
        if decoder_config.input_width != encoder_config.context_width:
            raise ValueError(
                f"decoder input width {decoder_config.input_width} != encoder context width "
                f"{encoder_config.context_width}"
            )
        self.params = params
        self.encoder = SequenceEncoder(encoder_config, vocab, params)
        self.decoder = Decoder(decoder_config, params, scaling)
        self.provider = select_variant(encoder_config)

    @classmethod
    def build(
        cls,
        encoder_config: EncoderConfig,
        vocab: Vocabulary,
        encoder_arrays: dict[str, np.ndarray],
        decoder_config: DecoderConfig,
        decoder_arrays: dict[str, np.ndarray],
        dtype=ad.DEFAULT_DTYPE,
        scaling: SideInputScaling | None = None,
    ) -> "ErpModel":
        names = init_params_shapes(encoder_config, vocab.size)
        arrays = {n: encoder_arrays[n] for n in names}
        arrays.update(decoder_arrays)
        return cls(encoder_config, vocab, decoder_config, ParameterSet(arrays, dtype=dtype), scaling)

    @classmethod
    def fresh(
        cls,
        encoder_config: EncoderConfig,
        vocab: Vocabulary,
        decoder_config: DecoderConfig,
        seed: int = 0,
        dtype=ad.DEFAULT_DTYPE,
    ) -> "ErpModel":
        from .encoder import init_params as init_encoder_params

        rng = np.random.default_rng(seed)
        enc = init_encoder_params(encoder_config, vocab.size, rng)
        dec = init_decoder_params(decoder_config, rng)
        return cls.build(encoder_config, vocab, enc, decoder_config, dec, dtype=dtype)

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def decoder_config(self) -> DecoderConfig:
        return self.decoder.config

    def context(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        return self.provider(self.encoder, batch.ids, batch.lengths, training, rng)

    def predict_from_context(self, context: Tensor, batch: Batch, signals: Sequence[str] | None = None) -> Tensor:
        pair = self.decoder.pair_embed(context)
        return self.decoder.predict_stacked(pair, batch.word_length, batch.log_prob, signals, valid=batch.valid)

    def forward(self, batch: Batch, signals: Sequence[str] | None = None, training: bool = False, rng=None) -> Tensor:
        return self.predict_from_context(self.context(batch, training, rng), batch, signals)

    def meta(self) -> dict:
        return {
            "encoder": self.encoder.config.to_dict(),
            "vocab": self.encoder.vocab.to_dict(),
            "decoder": self.decoder.config.to_dict(),
            "side_scaling": self.decoder.scaling.to_dict(),
        }
