"""Dense float32 tensors with tape-based reverse-mode differentiation.

Deliberately small: elementwise ops, matmul, softmax, layer norm, GELU,
reshaping, gather/scatter and the pooling/resampling primitives needed by the
completion model, plus a central-difference gradient checker. Data is
row-major numpy float32 throughout. Tensors are immutable once an op has
produced them and safe to share across threads; the tape is confined to a
single logical thread per run.

Ops record onto the innermost active ``Tape`` whenever any input requires a
gradient. ``Tape.backward`` replays entries in exact reverse recording order,
accumulating into each leaf's ``grad``. Only first-order gradients are
supported.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_F32 = np.float32

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


class ShapeMismatchError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """Dense float32 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_F32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_F32))


class _TapeEntry:
    __slots__ = ("name", "input_ids", "output_id", "run")

    def __init__(self, name: str, input_ids: tuple[int, ...], output_id: int,
                 run: Callable[[], None]):
        self.name = name
        self.input_ids = input_ids
        self.output_id = output_id
        self.run = run


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered op recording; backward replays in exact reverse order."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, root: Tensor) -> None:
        """Seed d(root)/d(root)=1 and accumulate grads into all leaves."""
        if root.data.size != 1:
            raise ShapeMismatchError(
                f"backward needs a scalar root, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for entry in reversed(self.entries):
            entry.run()


def _recording_for(inputs: Iterable[Tensor]) -> bool:
    return bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=_F32)  # own the buffer; g may be a view
    else:
        t.grad += g


def _record(name: str, inputs: Sequence[Tensor], out: Tensor,
            backward: Callable[[np.ndarray], None]) -> None:
    """Register ``backward`` (called with d(out)) on the active tape."""
    if not _recording_for(inputs):
        return
    out.requires_grad = True

    def run():
        if out.grad is not None:
            backward(out.grad)

    _TAPE_STACK[-1].entries.append(
        _TapeEntry(name, tuple(id(t) for t in inputs), id(out), run))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / affine

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record("add", (a, b), out, backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record("neg", (a,), out, lambda g: _accumulate(a, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record("mul", (a, b), out, backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _F32(_GELU_C0) * (v + _F32(_GELU_C1) * v * v * v)
    t = np.tanh(inner)
    out = Tensor(_F32(0.5) * v * (1.0 + t))

    def backward(g):
        du = _F32(_GELU_C0) * (1.0 + 3.0 * _F32(_GELU_C1) * v * v)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        _accumulate(x, g * local.astype(_F32))

    _record("gelu", (x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a (..., m, k) and b either (k, n) or (..., k, n)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeMismatchError(
            f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    _record("matmul", (a, b), out, backward)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    _record("softmax", (x,), out, backward)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            f"layer_norm affine params must have shape ({c},), "
            f"got gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _F32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (inv * (dxhat - m1 - xhat * m2)).astype(_F32))

    _record("layer_norm", (x, gamma, beta), out, backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(tuple(shape)))
    _record("reshape", (x,), out,
            lambda g: _accumulate(x, g.reshape(x.data.shape)))
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    _record("transpose", (x,), out,
            lambda g: _accumulate(x, g.transpose(inverse)))
    return out


def roll2d(x: Tensor, shifts: tuple[int, int]) -> Tensor:
    """Cyclic roll over the first two axes."""
    out = Tensor(np.roll(x.data, shifts, axis=(0, 1)))
    _record("roll2d", (x,), out,
            lambda g: _accumulate(x, np.roll(g, (-shifts[0], -shifts[1]), axis=(0, 1))))
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    _record("concat", tuple(parts), out, backward)
    return out


# ---------------------------------------------------------------------------
# gather / scatter over leading rows

def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``x[idx]`` along the first axis."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accumulate(x, buf)

    _record("gather_rows", (x,), out, backward)
    return out


def index_put_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` replaced by ``values``."""
    idx = np.asarray(idx, dtype=np.intp)
    data = base.data.copy()
    data[idx] = values.data
    out = Tensor(data)

    def backward(g):
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
            _accumulate(base, gb)
        _accumulate(values, g[idx])

    _record("index_put_rows", (base, values), out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions

def tensor_sum(x: Tensor) -> Tensor:
    # accumulate in f64 so scalar losses don't drown finite-difference checks
    out = Tensor(x.data.sum(dtype=np.float64))
    _record("sum", (x,), out,
            lambda g: _accumulate(x, np.broadcast_to(g, x.data.shape)))
    return out


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(dtype=np.float64))
    _record("mean", (x,), out,
            lambda g: _accumulate(x, np.broadcast_to(g / n, x.data.shape)))
    return out


# ---------------------------------------------------------------------------
# spatial primitives for the decoder heads

def im2col3x3(x: Tensor) -> Tensor:
    """Unfold 3x3 zero-padded neighborhoods of (H, W, C) into (H*W, 9*C)."""
    h, w, c = x.data.shape
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, 9 * c)
    out = Tensor(cols)

    def backward(g):
        gw = g.reshape(h, w, 3, 3, c)
        gpad = np.zeros((h + 2, w + 2, c), dtype=_F32)
        for dy in range(3):
            for dx in range(3):
                gpad[dy:dy + h, dx:dx + w] += gw[:, :, dy, dx, :]
        _accumulate(x, gpad[1:h + 1, 1:w + 1])

    _record("im2col3x3", (x,), out, backward)
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    h, w, c = x.data.shape
    out = Tensor(x.data.repeat(factor, axis=0).repeat(factor, axis=1))

    def backward(g):
        _accumulate(x, g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)))

    _record("upsample_nearest", (x,), out, backward)
    return out


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel-center source positions, clamped to the grid
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = (src - i0).astype(_F32)
    return i0, i1, t


def upsample_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resize (h, w, C) to ``out_hw`` with half-pixel-aligned bilinear weights."""
    h, w, c = x.data.shape
    oh, ow = out_hw
    i0, i1, ti = _bilinear_axis(h, oh)
    j0, j1, tj = _bilinear_axis(w, ow)
    ti_col = ti[:, None, None]
    tj_row = tj[None, :, None]
    rows = x.data[i0] * (1.0 - ti_col) + x.data[i1] * ti_col
    y = rows[:, j0] * (1.0 - tj_row) + rows[:, j1] * tj_row
    out = Tensor(y)

    def backward(g):
        grows = np.zeros((oh, w, c), dtype=_F32)
        np.add.at(grows, (slice(None), j0), g * (1.0 - tj_row))
        np.add.at(grows, (slice(None), j1), g * tj_row)
        gx = np.zeros_like(x.data)
        np.add.at(gx, i0, grows * (1.0 - ti_col))
        np.add.at(gx, i1, grows * ti_col)
        _accumulate(x, gx)

    _record("upsample_bilinear", (x,), out, backward)
    return out


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Mean-pool (h, w, C) into ``out_hw`` bins (floor/ceil bin edges)."""
    h, w, c = x.data.shape
    oh, ow = out_hw
    hb = [(i * h // oh, -(-(i + 1) * h // oh)) for i in range(oh)]
    wb = [(j * w // ow, -(-(j + 1) * w // ow)) for j in range(ow)]
    y = np.empty((oh, ow, c), dtype=_F32)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            y[i, j] = x.data[h0:h1, w0:w1].mean(axis=(0, 1), dtype=_F32)
    out = Tensor(y)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gx[h0:h1, w0:w1] += g[i, j] / ((h1 - h0) * (w1 - w0))
        _accumulate(x, gx)

    _record("adaptive_avg_pool", (x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# losses

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.abs(diff).mean(dtype=np.float64))
    n = diff.size

    def backward(g):
        local = np.sign(diff) / n
        _accumulate(pred, g * local)
        _accumulate(target, -g * local)

    _record("l1_loss", (pred, target), out, backward)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, K) logits."""
    if logits.data.ndim != 2:
        raise ShapeMismatchError(
            f"cross_entropy needs (N, K) logits, got {logits.shape}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"cross_entropy labels must have shape ({n},), got {labels.shape}")
    valid = np.ones(n, dtype=bool) if ignore_index is None else labels != ignore_index
    scored = labels[valid]
    if scored.size and (scored.min() < 0 or scored.max() >= k):
        bad = int(scored[(scored < 0) | (scored >= k)][0])
        raise ValueError(f"label id {bad} out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n_scored = int(valid.sum())
    if n_scored == 0:
        raise ValueError("cross_entropy: no scored pixels (all ignored)")
    picked = logp[np.flatnonzero(valid), scored]
    out = Tensor(-picked.mean(dtype=np.float64))

    def backward(g):
        d = np.exp(logp)
        d[np.flatnonzero(valid), scored] -= 1.0
        d[~valid] = 0.0
        _accumulate(logits, g * d / n_scored)

    _record("cross_entropy", (logits,), out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor. Per coordinate the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); the max over the
    checked coordinates is returned. ``sample`` limits the check to that many
    seeded-random coordinates (the full model would otherwise need thousands
    of forward passes).
    """
    if h <= 0:
        raise ValueError("grad_check step h must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        if not isinstance(y, Tensor) or y.data.size != 1:
            raise ValueError("grad_check target must return a scalar Tensor")
    tape.backward(y)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.size, size=sample, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        bumped = flat.copy()
        bumped[i] = flat[i] + _F32(h)
        up = float(f(Tensor(bumped.reshape(x.data.shape))).data.reshape(()))
        bumped[i] = flat[i] - _F32(h)
        down = float(f(Tensor(bumped.reshape(x.data.shape))).data.reshape(()))
        numeric = (up - down) / (2.0 * h)
        a = float(a_flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
