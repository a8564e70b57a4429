"""Minimal reverse-mode autodiff over dense NCHW float tensors.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape (or inside
:func:`no_grad`) they are plain numpy computations.

    >>> x = Tensor(np.array([3.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_mean(hadamard(x, x))
    >>> tape.backward(loss)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = (np.float32, np.float64)


class TapeError(RuntimeError):
    pass


class Tensor:
    """Float array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Record] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Record:
    __slots__ = ("inputs", "output", "backward", "tape")

    def __init__(self, inputs, output, backward, tape):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded.  A tape can be
    replayed backward exactly once.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for t, g in zip(rec.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
                elif id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g
        self.records.clear()


_TAPE_STACK: List[Optional[Tape]] = []


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that recorded ``loss``."""
    if loss.node is None:
        raise TapeError("loss has no recorded history")
    loss.node.tape.backward(loss)


@contextlib.contextmanager
def no_grad():
    """Suspend recording; ops inside produce constants."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Record(tuple(inputs), out, backward_fn, tape)
        tape.records.append(out.node)
    return out


def _check_shape(shape) -> Tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"tensor extents must be positive, got {shape}")
    return shape


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- creation

def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype))


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def randn_init(shape, fan_in: int, seed, dtype=np.float32) -> Tensor:
    """He-normal init: N(0, 2/fan_in).  ``seed`` may be an int or a Generator."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    shape = _check_shape(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = g / bd
        return gb, -gb * out

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows and saturates to exactly 0 / 1
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),))


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2 * g * d,))


# ---------------------------------------------------------------- reductions

def reduce_sum(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("reduce over empty tensor")
    shape, dt = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(dtype=dt)), (x,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def reduce_mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("reduce over empty tensor")
    shape, dt, n = x.shape, x.dtype, x.size
    return _make(np.asarray(x.data.mean(dtype=dt)), (x,),
                 lambda g: (np.full(shape, g / n, dtype=dt),))


def sum_scalars(terms: Sequence[Tensor], weights: Optional[Sequence[float]] = None) -> Tensor:
    """Weighted sum of scalar tensors."""
    if weights is None:
        weights = [1.0] * len(terms)
    if len(weights) != len(terms):
        raise ValueError("weights and terms differ in length")
    total = None
    for t, w in zip(terms, weights):
        part = scale(t, w)
        total = part if total is None else add(total, part)
    if total is None:
        raise ValueError("no terms to sum")
    return total


# ---------------------------------------------------------------- channel plumbing

def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    if len(tensors) == 1:
        return _make(tensors[0].data.copy(), tensors, lambda g: (g,))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=1)))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape
    if not 0 <= start < stop <= shape[1]:
        raise ValueError(f"bad channel slice [{start}:{stop}] for {shape}")

    def bw(g):
        full_g = np.zeros(shape, dtype=g.dtype)
        full_g[:, start:stop] = g
        return (full_g,)

    return _make(x.data[:, start:stop].copy(), (x,), bw)


def expand_channels(m: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map across ``channels``; backward sums over channels."""
    if m.shape[1] != 1:
        raise ValueError(f"expand_channels needs a single-channel map, got {m.shape}")
    n, _, h, w = m.shape
    out = np.broadcast_to(m.data, (n, channels, h, w)).copy()
    return _make(out, (m,), lambda g: (g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------- spatial ops

def _im2col(xpt: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xpt is channel-major (C, N, Hp, Wp); returns (C*k*k, N*ho*wo)
    c, n = xpt.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xpt.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _cols_cm(xt: np.ndarray, k: int, stride: int):
    """im2col of a channel-major array with zero 'same' padding."""
    c, n, h, w = xt.shape
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if k == 1 and stride == 1:
        return np.ascontiguousarray(xt).reshape(c, n * h * w), ho, wo
    xpt = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xt.dtype)
    xpt[:, :, p:p + h, p:p + w] = xt
    return _im2col(xpt, k, stride, ho, wo), ho, wo


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same' cross-correlation, stride 1 or 2."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    o, c, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    n, cx, h, wd = x.shape
    if cx != c:
        raise ValueError(f"conv2d channel mismatch: input {cx}, weight expects {c}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    p = k // 2
    cols, ho, wo = _cols_cm(x.data.transpose(1, 0, 2, 3), k, stride)
    wmat = w.data.reshape(o, c * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, w) if b is None else (x, w, b)
    need_x = x.requires_grad

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gmat = gt.reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape)
        gx = None
        if need_x and stride == 1:
            # input gradient of a stride-1 correlation is a correlation with the flipped kernel
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, o * k * k)
            gcols, _, _ = _cols_cm(gt, k, 1)
            gx = np.ascontiguousarray((wflip @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
        elif need_x:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, ho, wo)
            gxpt = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxpt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxpt[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return _make(out, inputs, bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out.copy(), (x,), bw)


def filter2d_valid(x: Tensor, kernel1d: np.ndarray) -> Tensor:
    """Depthwise separable 'valid' correlation with a fixed 1-d kernel on H then W."""
    kern = np.asarray(kernel1d, dtype=x.dtype)
    k = kern.size
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than filter window {k}")
    tmp = sliding_window_view(x.data, k, axis=2) @ kern           # (n,c,h-k+1,w)
    out = sliding_window_view(tmp, k, axis=3) @ kern               # (n,c,h-k+1,w-k+1)
    flip = kern[::-1]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (0, 0), (k - 1, k - 1)))
        gt = sliding_window_view(gp, k, axis=3) @ flip             # (n,c,h-k+1,w)
        gp = np.pad(gt, ((0, 0), (0, 0), (k - 1, k - 1), (0, 0)))
        gx = sliding_window_view(gp, k, axis=2) @ flip
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, n: int = 20,
               seed=0, floor: float = 0.0, coords=None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is a zero-argument closure that builds the scalar loss from ``x``
    (and anything else it captures).  The relative error at a coordinate is
    ``|a - d| / max(|a|, |d|, floor)``; ``floor`` keeps near-zero gradients from
    dominating at low precision.
    """
    x.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    if coords is None:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.size, size=min(n, flat.size), replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(num), floor)
            if denom == 0.0:
                continue
            worst = max(worst, abs(a - num) / denom)
    return worst
