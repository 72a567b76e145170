"""Dense tensor algebra with reverse-mode differentiation on an explicit tape.

Tensors wrap a numpy array plus an optional gradient buffer. Primitive ops
record their adjoint closures on the active ComputationTape; replaying the
tape in reverse accumulates gradients into every tensor on the path to the
loss. Precision is a process-global switch: float32 for training, float64
for gradient verification.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

_state = threading.local()

# Test hook: name of a primitive whose adjoint gets deliberately corrupted.
debug_corrupt_op: str | None = None


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float64
        _state.tapes = []
    return _state


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for all freshly created tensors."""
    if bits not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _tls().dtype = np.float32 if bits == 32 else np.float64


def get_dtype() -> np.dtype:
    return np.dtype(_tls().dtype)


@contextmanager
def precision(bits: int):
    st = _tls()
    old = st.dtype
    set_precision(bits)
    try:
        yield
    finally:
        st.dtype = old


class Tensor:
    """Shape-tagged dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data) -> Tensor:
    """Constant tensor in the current precision."""
    return Tensor(data)


def param(data) -> Tensor:
    """Trainable leaf: requires_grad with a zero-initialized grad buffer."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# One tape record per primitive: (op name, inputs, output, adjoint fn).
TapeRecord = tuple


class ComputationTape:
    """Ordered record of primitive ops, replayed in reverse for adjoints."""

    def __init__(self):
        self.records: list[tuple] = []

    def __enter__(self) -> "ComputationTape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tls().tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate d(loss)/dx into .grad of every tensor on the path."""
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += np.ones_like(loss.data) if seed is None else seed
        for _op, inputs, output, backward in reversed(self.records):
            og = output.grad
            if og is None:
                continue
            grads = backward(og)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # Copy: adjoints may alias the upstream gradient buffer.
                    inp.grad = np.array(g, dtype=inp.data.dtype)
                else:
                    inp.grad += g


def _active_tape() -> ComputationTape | None:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    if track:
        out.requires_grad = True
        if op == debug_corrupt_op:
            inner = backward

            def backward(g, _inner=inner):
                grads = list(_inner(g))
                for i, gr in enumerate(grads):
                    if gr is not None:
                        grads[i] = gr + 1000.0
                        break
                return tuple(grads)

        tape.records.append((op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def pow_const(a: Tensor, c: float) -> Tensor:
    out = np.power(a.data, c)
    return _record("pow_const", (a,), out,
                   lambda g: (g * c * np.power(a.data, c - 1.0),))


def absolute(a: Tensor) -> Tensor:
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record("softplus", (a,), out, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), a.data * mask, lambda g: (g * mask,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data >= b.data
    return _record("maximum", (a, b), np.maximum(a.data, b.data),
                   lambda g: (_unbroadcast(g * mask, a.shape),
                              _unbroadcast(g * ~mask, b.shape)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data <= b.data
    return _record("minimum", (a, b), np.minimum(a.data, b.data),
                   lambda g: (_unbroadcast(g * mask, a.shape),
                              _unbroadcast(g * ~mask, b.shape)))


# ---------------------------------------------------------------------------
# Reductions and shape ops


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    return _record("concat", tuple(parts), out, backward)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; adjoint scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    unique = len(np.unique(idx)) == len(idx)

    def backward(g):
        z = np.zeros_like(a.data)
        if unique:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record("gather_rows", (a,), out, backward)


def row_update(a: Tensor, idx, rows: Tensor) -> Tensor:
    """Replace rows of a (along axis 0) with the given rows; indices unique."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data.copy()
    out[idx] = rows.data

    def backward(g):
        ga = g.copy()
        ga[idx] = 0.0
        return (ga, g[idx])

    return _record("row_update", (a, rows), out, backward)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record("matmul", (a, b), out, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (a,), out, backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    # Max shift is a constant; its contribution to the derivative cancels.
    shift = a.data.max(axis=axis, keepdims=True)
    return log(reduce_sum(exp(a - tensor(shift)), axis=axis)) + tensor(np.squeeze(shift, axis=axis))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ConfigError(f"layer_norm needs a normalized dim >= 2, got {d}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(tensor(1.0), sqrt(var + eps))
    return mul(centered, inv) * gain + bias


# ---------------------------------------------------------------------------
# Structured primitives for convolution and RoI sampling


def extract_patches(x: Tensor, ksize: int, stride: int, pad: int) -> Tensor:
    """im2col over a batched [B,H,W,C] map -> [B,OH,OW,ksize*ksize*C]."""
    b, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - ksize) // stride + 1
    ow = (w + 2 * pad - ksize) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(1, 2))
    win = win[:, ::stride, ::stride]          # [B,OH,OW,C,k,k]
    out = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    out = out.reshape(b, oh, ow, ksize * ksize * c)

    def backward(g):
        g = g.reshape(b, oh, ow, ksize, ksize, c)
        gp = np.zeros_like(xp)
        for ki in range(ksize):
            for kj in range(ksize):
                gp[:, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += g[:, :, :, ki, kj]
        if pad:
            gp = gp[:, pad:-pad, pad:-pad]
        return (np.ascontiguousarray(gp),)

    return _record("extract_patches", (x,), out, backward)


def bilinear_sample(f: Tensor, points: np.ndarray) -> Tensor:
    """Sample [H,W,C] at fractional (x, y) index pairs -> [N,C].

    Points are data, not differentiated; gradients flow to f only.
    Coordinates are clamped to the border (replicate padding). Internally a
    dense [N, H*W] interpolation-weight matrix makes the adjoint one matmul.
    """
    h, w, c = f.shape
    n = len(points)
    pts = np.asarray(points, dtype=f.data.dtype)
    xs = np.clip(pts[:, 0], 0.0, w - 1.0)
    ys = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    weights = np.zeros((n, h * w), dtype=f.data.dtype)
    rows = np.arange(n)
    np.add.at(weights, (rows, y0 * w + x0), (1 - fy) * (1 - fx))
    np.add.at(weights, (rows, y0 * w + x1), (1 - fy) * fx)
    np.add.at(weights, (rows, y1 * w + x0), fy * (1 - fx))
    np.add.at(weights, (rows, y1 * w + x1), fy * fx)
    out = weights @ f.data.reshape(h * w, c)

    def backward(g):
        return ((weights.T @ g).reshape(h, w, c),)

    return _record("bilinear_sample", (f,), out, backward)


# ---------------------------------------------------------------------------
# Parameter containers and composed layers


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                gain: float = 1.0) -> LinearParams:
    """Uniform +-gain/sqrt(fan_in) weights and biases; gain sqrt(6) keeps
    activation variance through a relu layer (used by the conv blocks)."""
    bound = gain / math.sqrt(fan_in)
    w = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = param(rng.uniform(-bound, bound, size=(fan_out,)) / gain)
    return LinearParams(w, b)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return matmul(x, p.w) + p.b


@dataclass
class MHAParams:
    heads: int
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams


def init_mha(rng: np.random.Generator, dim: int, heads: int) -> MHAParams:
    if dim % heads != 0:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    return MHAParams(heads,
                     init_linear(rng, dim, dim), init_linear(rng, dim, dim),
                     init_linear(rng, dim, dim), init_linear(rng, dim, dim))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: MHAParams) -> Tensor:
    """Scaled dot-product attention with projected heads.

    Accepts [n,d] single inputs or [B,n,d] stacks (batch of independent
    attention problems sharing the projections).
    """
    d = q.shape[-1]
    if d % p.heads != 0:
        raise ConfigError(f"attention dim {d} not divisible by {p.heads} heads")
    squeeze = q.ndim == 2
    if squeeze:
        q = reshape(q, (1,) + q.shape)
        k = reshape(k, (1,) + k.shape)
        v = reshape(v, (1,) + v.shape)
    bsz, nq, _ = q.shape
    nk = k.shape[1]
    hd = d // p.heads

    def split(x: Tensor, n: int) -> Tensor:
        return transpose(reshape(x, (bsz, n, p.heads, hd)), (0, 2, 1, 3))

    qh = split(linear(q, p.q), nq)
    kh = split(linear(k, p.k), nk)
    vh = split(linear(v, p.v), nk)
    logits = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, vh)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, nq, d))
    out = linear(ctx, p.out)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               step: float = 1e-5, tol: float = 1e-4,
               name: str = "f") -> GradCheckReport:
    """Compare the taped gradient of a scalar function against central differences.

    Runs in the current precision, which must be 64-bit; f must be
    deterministic in x.
    """
    if get_dtype() != np.float64:
        raise ConfigError("grad_check requires 64-bit precision mode")
    x = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    with ComputationTape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise DimensionError(f"grad_check: f must be scalar-valued, got {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: non-finite function value")
    tape.backward(y)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("grad_check: non-finite function value")
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(name, float(rel.max()) if rel.size else 0.0, tol)
