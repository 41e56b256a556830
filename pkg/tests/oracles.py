"""Independent re-computations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np

from erp_mtl import autodiff as ad
from erp_mtl.autodiff import Tape
from erp_mtl.decoder import DecoderConfig
from erp_mtl.encoder import EncoderConfig, Vocabulary
from erp_mtl.model import ErpModel, make_batch
from erp_mtl.training import build_loss


def naive_loss(signals, preds, targets, content):
    """Per-token loop: squared errors of included signals on content tokens, over the content count."""
    B, T, S = preds.shape
    total = 0.0
    n_content = 0
    for b in range(B):
        for t in range(T):
            if not content[b, t]:
                continue
            n_content += 1
            for k in range(len(signals)):
                y = targets[b, t, k]
                if not np.isnan(y):
                    total += (float(preds[b, t, k]) - float(y)) ** 2
    return total / n_content


def brute_force_bhy(p, q):
    """Try every k from m down; the largest passing k fixes the rejection set."""
    m = len(p)
    c = sum(1.0 / j for j in range(1, m + 1))
    srt = sorted(range(m), key=lambda i: (p[i], i))
    for k in range(m, 0, -1):
        if p[srt[k - 1]] <= k * q / (m * c):
            return set(srt[:k])
    return set()


def tiny_composite(seed=0, variant="bidirectional", signals=("N400", "P600")):
    """A float64 encoder+decoder small enough for exhaustive finite differences."""
    vocab = Vocabulary.build([["a", "b", "c", "d", "e"]])
    enc = EncoderConfig(embedding_dim=3, hidden_dim=4, output_dim=3, layers=2, variant=variant,
                        dropout_embedding=0.1, dropout_input=0.2, dropout_hidden=0.2,
                        dropout_output=0.2, weight_drop=0.3)
    dec = DecoderConfig(pair_dim=4, signal_names=signals, input_width=enc.context_width)
    model = ErpModel.fresh(enc, vocab, dec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    lengths = (4, 2, 3)
    batch = make_batch(
        [rng.integers(0, vocab.size, n) for n in lengths],
        [rng.integers(1, 9, n).astype(float) for n in lengths],
        [-rng.uniform(0.5, 4.0, n) for n in lengths],
        [np.array([True, False, True, True][:n]) for n in lengths],
        [rng.standard_normal((n, len(signals))) for n in lengths],
    )
    return model, batch


def composite_grad_error(seed=0, training=True, step=1e-5, elementwise=False):
    """Max relative error of d(loss)/d(every parameter) for the tiny composite model.

    With ``elementwise`` the result is ``(per_tensor, elementwise)``, the
    second being max |a - n| / (|n| + 1e-8) over every scalar parameter.

    Dropout masks are regenerated from the same seed on every evaluation,
    so the loss is a deterministic function of the parameters.
    """
    model, batch = tiny_composite(seed)
    signals = model.decoder_config.signal_names
    params = model.params

    def loss_value():
        rng = np.random.default_rng(99)
        pred = model.forward(batch, signals, training=training, rng=rng)
        return build_loss(signals, pred, batch.targets, batch.content)

    # encoder LM heads never reach this loss; their gradient must be exactly zero
    with Tape() as tape:
        loss = loss_value()
    analytic = ad.backward(tape, loss, params.trainable_tensors())
    worst = worst_elem = 0.0
    for name in params.names():
        arr = params[name].data
        numeric = np.zeros_like(arr)
        for idx in itertools.product(*map(range, arr.shape)):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = float(loss_value().data)
            arr[idx] = orig - step
            fm = float(loss_value().data)
            arr[idx] = orig
            numeric[idx] = (fp - fm) / (2 * step)
        worst = max(worst, tensor_relative_error(analytic[name], numeric))
        worst_elem = max(worst_elem, float(np.max(np.abs(analytic[name] - numeric) / (np.abs(numeric) + 1e-8))))
    return (worst, worst_elem) if elementwise else worst


def tensor_relative_error(analytic, numeric, eps=1e-8):
    """Largest absolute discrepancy over the tensor's largest gradient magnitude.

    Elementwise ratios are dominated by near-zero entries, where the
    O(step**2) truncation of central differences (about 1e-10 here) is
    comparable to the gradient itself.
    """
    a = np.asarray(analytic, float)
    n = np.asarray(numeric, float)
    if not (np.isfinite(a).all() and np.isfinite(n).all()):
        return float("inf")
    return float(np.abs(a - n).max() / (np.abs(n).max() + eps))


# (df, one-sided upper-tail probability, t quantile) from standard Student-t tables
T_TABLE = (
    (1, 0.025, 12.706205),
    (2, 0.025, 4.302653),
    (3, 0.025, 3.182446),
    (5, 0.025, 2.570582),
    (10, 0.025, 2.228139),
    (20, 0.025, 2.085963),
    (30, 0.025, 2.042272),
    (120, 0.025, 1.979930),
    (10, 0.005, 3.169273),
    (20, 0.005, 2.845340),
    (10, 0.05, 1.812461),
    (1, 0.05, 6.313752),
)
