"""Dense tensors with tape-recorded reverse-mode gradients.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``) every primitive whose inputs require gradients
is appended to it, and :func:`backward` walks the records in reverse.

The primitive set is deliberately small: matmul, add, multiply, concat,
slice, take (row gather), sigmoid, tanh, relu, dropout with a recorded
mask, width-2 causal convolution, mean, squared error and a
log-softmax negative log-likelihood.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(AutodiffError, ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def leaf(cls, data, requires_grad: bool = False, name: str | None = None, dtype=None) -> "Tensor":
        """Build an input tensor, rejecting NaN/Inf values."""
        t = cls(data, requires_grad=requires_grad, name=name, dtype=dtype)
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"non-finite values in input {name or '<unnamed>'}")
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any] = field(default_factory=dict)


_state = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered log of primitive applications.

    A tape belongs to the thread that entered it; tapes never share state.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded op from recorded inputs.

        Intermediate results are fed forward, so the returned arrays are
        what a fresh forward pass would produce. Dropout masks come from
        the record, which keeps replay deterministic.
        """
        fresh: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            vals = [fresh.get(id(t), t.data) for t in rec.inputs]
            fwd = _OPS[rec.op][0]
            out = fwd(*vals, **rec.attrs)
            fresh[id(rec.output)] = out
            outs.append(out)
        return outs


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, **attrs) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(op, tuple(inputs), result, attrs))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---- forward kernels -------------------------------------------------------

def _matmul_fwd(a, b):
    return np.matmul(a, b)


def _matmul_vjp(g, a, b, out):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return _unbroadcast(ga, a.shape), gb


def _add_vjp(g, a, b, out):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_vjp(g, a, b, out):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, *xs, out, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_fwd(a, index):
    return a[index]


def _slice_vjp(g, a, out, index):
    full = np.zeros_like(a)
    full[index] = g
    return (full,)


def _take_fwd(a, indices):
    return a[indices]


def _take_vjp(g, a, out, indices):
    full = np.zeros_like(a)
    np.add.at(full, indices, g)
    return (full,)


def _sigmoid_fwd(a):
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * a) + 0.5


def _sigmoid_vjp(g, a, out):
    return (g * out * (1.0 - out),)


def _tanh_vjp(g, a, out):
    return (g * (1.0 - out * out),)


def _relu_fwd(a):
    return np.maximum(a, 0)


def _relu_vjp(g, a, out):
    return (g * (a > 0),)


def _dropout_fwd(a, mask):
    return a * mask


def _dropout_vjp(g, a, out, mask):
    return (_unbroadcast(g * mask, a.shape),)


def _conv_fwd(x, w, b):
    y = np.matmul(x, w[1]) + b
    y[:, 1:] += np.matmul(x[:, :-1], w[0])
    return y


def _conv_vjp(g, x, w, b, out):
    gx = np.matmul(g, w[1].T)
    gx[:, :-1] += np.matmul(g[:, 1:], w[0].T)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw1 = x2.T @ g2
    gw0 = x[:, :-1].reshape(-1, x.shape[-1]).T @ g[:, 1:].reshape(-1, g.shape[-1])
    gw = np.stack([gw0, gw1])
    gb = g2.sum(axis=0)
    return gx, gw, gb


def _mean_fwd(a, axis):
    return np.asarray(np.mean(a, axis=axis), dtype=a.dtype)


def _mean_vjp(g, a, out, axis):
    if axis is None:
        n = a.size
        return (np.broadcast_to(g, a.shape).astype(a.dtype) / n,)
    n = a.shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)


def _sqerr_fwd(p, t):
    d = p - t
    return d * d


def _sqerr_vjp(g, p, t, out):
    gd = 2.0 * g * (p - t)
    return _unbroadcast(gd, p.shape), _unbroadcast(-gd, t.shape)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _nll_fwd(logits, targets, weights):
    lp = _log_softmax(logits)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return np.asarray(-(picked * weights).sum() / weights.sum(), dtype=logits.dtype)


def _nll_vjp(g, logits, out, targets, weights):
    p = np.exp(_log_softmax(logits))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    scale = (weights / weights.sum())[..., None]
    return (g * (p - onehot) * scale,)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (np.add, _add_vjp),
    "multiply": (np.multiply, _mul_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "slice": (_slice_fwd, _slice_vjp),
    "take": (_take_fwd, _take_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "tanh": (np.tanh, _tanh_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "dropout": (_dropout_fwd, _dropout_vjp),
    "conv_causal": (_conv_fwd, _conv_vjp),
    "mean": (_mean_fwd, _mean_vjp),
    "squared_error": (_sqerr_fwd, _sqerr_vjp),
    "nll": (_nll_fwd, _nll_vjp),
}

PRIMITIVES = tuple(_OPS)


# ---- public primitives -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim != 2 and b.data.ndim != a.data.ndim:
        raise ShapeError("matmul", f"unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), _matmul_fwd(a.data, b.data))


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _record("add", (a, b), a.data + b.data)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("multiply", a, b)
    return _record("multiply", (a, b), a.data * b.data)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError("concat", f"incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    return _record("concat", tuple(tensors), _concat_fwd(*(t.data for t in tensors), axis=ax), axis=ax)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: slices and integers only."""
    if not isinstance(index, tuple):
        index = (index,)
    if any(not isinstance(i, (slice, int)) and i is not Ellipsis for i in index):
        raise ShapeError("slice", "only slices, integers and Ellipsis are supported")
    return _record("slice", (a,), a.data[index], index=index)


def take(a: Tensor, indices) -> Tensor:
    """Gather rows of ``a`` (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("take", f"index out of range for {a.shape[0]} rows")
    return _record("take", (a,), a.data[idx], indices=idx)


def sigmoid(a: Tensor) -> Tensor:
    return _record("sigmoid", (a,), _sigmoid_fwd(a.data))


def tanh(a: Tensor) -> Tensor:
    return _record("tanh", (a,), np.tanh(a.data))


def relu(a: Tensor) -> Tensor:
    return _record("relu", (a,), _relu_fwd(a.data))


def dropout_mask(rng: np.random.Generator, shape, p: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Bernoulli keep-mask scaled by 1/(1-p)."""
    if p <= 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - p), dtype=dtype)


def dropout(a: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError("dropout", f"mask {mask.shape} does not broadcast to {a.shape}") from None
    return _record("dropout", (a,), a.data * mask, mask=mask)


def conv_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Width-2 left-padded convolution over axis 1 of a (batch, time, dim) input.

    ``w[0]`` weights the previous position, ``w[1]`` the current one; the
    position before the first sees zeros.
    """
    if x.data.ndim != 3:
        raise ShapeError("conv_causal", f"expected (batch, time, dim) input, got {x.shape}")
    if w.data.ndim != 3 or w.shape[0] != 2 or w.shape[1] != x.shape[2]:
        raise ShapeError("conv_causal", f"kernel {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[2],):
        raise ShapeError("conv_causal", f"bias {b.shape} does not match {w.shape[2]} channels")
    return _record("conv_causal", (x, w, b), _conv_fwd(x.data, w.data, b.data))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return _record("mean", (a,), _mean_fwd(a.data, axis), axis=axis)


def squared_error(pred: Tensor, target: Tensor) -> Tensor:
    _check_broadcast("squared_error", pred, target)
    return _record("squared_error", (pred, target), _sqerr_fwd(pred.data, target.data))


def nll(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError("nll", f"targets {tgt.shape} do not match logits {logits.shape}")
    w = np.ones(tgt.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    if w.sum() <= 0:
        raise ShapeError("nll", "no positions carry weight")
    return _record("nll", (logits,), _nll_fwd(logits.data, tgt, w), targets=tgt, weights=w)


# ---- reverse pass ----------------------------------------------------------

def backward(
    tape: Tape,
    output: Tensor,
    params: Mapping[str, Tensor],
    seed: np.ndarray | Tensor | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of ``output`` (contracted with ``seed``) for every entry of ``params``.

    Parameters the output does not reach get zeros.
    """
    if not tape.records:
        raise AutodiffError("backward called on an empty tape; run the forward pass first")
    if seed is None:
        seed_arr = np.ones_like(output.data)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ShapeError("backward", f"seed {seed_arr.shape} does not match output {output.shape}")

    grads: dict[int, np.ndarray] = {id(output): seed_arr}
    found = False
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if rec.output is output:
            found = True
        if g is None:
            continue
        vals = [t.data for t in rec.inputs]
        vjp = _OPS[rec.op][1]
        if rec.op == "concat":
            in_grads = vjp(g, *vals, out=rec.output.data, **rec.attrs)
        else:
            in_grads = vjp(g, *vals, rec.output.data, **rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if not found and not any(output is p for p in params.values()):
        raise AutodiffError("output was not produced on this tape; run the forward pass first")

    return {
        name: np.asarray(grads[id(p)], dtype=p.dtype).reshape(p.shape)
        if id(p) in grads
        else np.zeros_like(p.data)
        for name, p in params.items()
    }


# ---- finite-difference checking -------------------------------------------

def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, eps: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not (np.isfinite(a).all() and np.isfinite(n).all()):
        return float("inf")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(n) + eps)))


def numeric_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, step: float) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_function(
    build: Callable[[Tensor], Tensor],
    point: np.ndarray,
    step: float = 1e-5,
    eps: float = 1e-8,
) -> float:
    """Compare analytic and central-difference gradients of a scalar-valued ``build``."""
    point = np.asarray(point, dtype=np.float64)

    def value(x: np.ndarray) -> float:
        out = build(Tensor(x.copy(), dtype=np.float64))
        return float(np.sum(out.data))

    x = Tensor(point.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        out = build(x)
    if not np.isfinite(out.data).all():
        return float("inf")
    analytic = backward(tape, out, {"x": x})["x"] if tape.records else np.zeros_like(point)
    numeric = numeric_gradient(value, point, step)
    return max_relative_error(analytic, numeric, eps)


def _projector(shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def _project(y: Tensor, seed: int = 0) -> Tensor:
    r = Tensor(_projector(y.shape, seed), dtype=np.float64)
    return mean(multiply(y, r))


def _away_from_kink(point: np.ndarray, margin: float) -> np.ndarray:
    p = np.array(point, dtype=np.float64)
    near = np.abs(p) < margin
    p[near] = np.where(p[near] >= 0, margin, -margin)
    return p


def _grad_check_builders(shape: tuple[int, ...]) -> dict[str, Callable[[Tensor], Tensor]]:
    rng = np.random.default_rng(1234)
    n = shape[-1]

    def other(s):
        return Tensor(rng.standard_normal(s), dtype=np.float64)

    right = other((n, 3))
    same = other(shape)
    bias = other(shape[-1:])
    mask = dropout_mask(np.random.default_rng(7), shape, 0.5, dtype=np.float64)
    half = [slice(None)] * len(shape)
    half[-1] = slice(0, max(1, n // 2))
    idx = tuple(half)
    rows = np.array([0, shape[0] - 1, 0], dtype=np.int64)
    labels = np.arange(int(np.prod(shape[:-1]))).reshape(shape[:-1]) % n
    kernel = Tensor(np.random.default_rng(3).standard_normal((2, n, 4)), dtype=np.float64)
    kbias = Tensor(np.random.default_rng(4).standard_normal(4), dtype=np.float64)

    return {
        "identity": lambda x: _project(x),
        "matmul": lambda x: _project(matmul(x, right)),
        "add": lambda x: _project(add(x, bias)),
        "multiply": lambda x: _project(multiply(x, same)),
        "concat": lambda x: _project(concat([x, same, x], axis=-1)),
        "slice": lambda x: _project(slice_(x, idx)),
        "take": lambda x: _project(take(x, rows)),
        "sigmoid": lambda x: _project(sigmoid(x)),
        "tanh": lambda x: _project(tanh(x)),
        "relu": lambda x: _project(relu(x)),
        "dropout": lambda x: _project(dropout(x, mask)),
        "conv_causal": lambda x: _project(conv_causal(x, kernel, kbias)),
        "mean": lambda x: _project(mean(x, axis=0)) if x.data.ndim > 1 else mean(x),
        "squared_error": lambda x: _project(squared_error(x, same)),
        "nll": lambda x: nll(x, labels),
    }


GRAD_CHECK_OPS = ("identity",) + PRIMITIVES


def grad_check(opname: str, point, step: float = 1e-5, eps: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients of one op.

    The op is applied to ``point`` (other operands are fixed random
    draws) and reduced to a scalar through a fixed random projection.
    ReLU inputs are pushed away from the kink first. Non-finite
    intermediates come back as ``inf``.
    """
    point = np.array(point, dtype=np.float64)
    if opname == "conv_causal" and point.ndim == 2:
        point = point[None]
    if point.ndim == 0:
        point = point.reshape(1)
    if opname == "relu":
        point = _away_from_kink(point, margin=10 * step)
    builders = _grad_check_builders(point.shape)
    if opname not in builders:
        raise KeyError(f"unknown op {opname!r}; choose from {sorted(builders)}")
    with np.errstate(all="ignore"):
        return check_function(builders[opname], point, step=step, eps=eps)


class ParameterSet:
    """Named parameter tensors plus a trainable mask.

    Only trainable entries have ``requires_grad`` set, so frozen ones are
    never recorded on a tape and never receive updates.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor.leaf(np.array(array, dtype=self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, t in self.tensors.items():
            flag = bool(predicate(name))
            self.trainable[name] = flag
            t.requires_grad = flag

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if self.trainable[n]}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self.tensors[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != t.shape:
            raise ShapeError("assign", f"{name}: {value.shape} does not match {t.shape}")
        t.data = value

    def update(self, other: Mapping[str, np.ndarray]) -> None:
        for name, value in other.items():
            self.assign(name, value)
