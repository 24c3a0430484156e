"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations the encoder, the vector-neuron stack and the losses need
are provided. Ops executed while a :class:`Tape` is active (and touching at
least one tensor that requires a gradient) are recorded in execution order;
:meth:`Tape.backward` replays them in reverse exactly once.

Storage is float32 by default. :func:`precision` switches new tensors to
float64, which is how gradient checks run their "shadow" pass. Reductions and
batch statistics always accumulate in float64.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "NonFiniteError", "ShapeError", "precision",
    "add", "sub", "mul", "neg", "reciprocal", "matmul", "transpose", "reshape",
    "sum", "mean", "frobenius_sq", "linear", "leaky_relu", "dropout", "maxpool3d",
    "batchnorm3d", "conv3d", "softmax_cross_entropy", "mse", "vn_relu",
    "grad_check", "SGD", "lr_schedule",
]

_DTYPE = np.float32
_TAPES: list["Tape"] = []
_CONV_CHUNK_BYTES = 64 * 2**20


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        a = np.asarray(data)
        if dtype is not None:
            a = a.astype(dtype, copy=False)
        elif a.dtype.kind != "f" or (a.dtype != _DTYPE and not isinstance(self, Parameter)):
            a = a.astype(_DTYPE)
        self.data = a
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _bad_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named trainable leaf; keeps its own dtype and a same-shape ``grad``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.asarray(data).dtype
                                  if np.asarray(data).dtype.kind == "f" else _DTYPE),
                         requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)
        return self


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of executed primitives; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        if loss.is_leaf:
            _accumulate(loss, np.ones_like(loss.data))
            return
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                _check_finite(f"{node.op} backward", gi)
                if inp.is_leaf:
                    _accumulate(inp, gi)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi
        self.nodes.clear()


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.grad.dtype, copy=False)


def _check_finite(op: str, a: np.ndarray):
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Tensors for a binary op; a bare scalar takes the other operand's dtype."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0 and isinstance(b, Tensor):
        return Tensor(a, dtype=b.data.dtype), b
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.data.dtype)
    return _as_tensor(a), _as_tensor(b)


def _result_dtype(*ts):
    return np.result_type(*[t.data.dtype for t in ts], _DTYPE)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data, t.grad, t.name = out, None, None
    t.requires_grad, t.is_leaf = False, True
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad, t.is_leaf = True, False
        tape.nodes.append(_Node(op, tuple(inputs), t, vjp))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _record("reciprocal", out, (a,), lambda g: (-g * out * out,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))
    return _record("leaky_relu", out, (x,),
                   lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules on leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (batch, in), weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, vjp)


# -- reductions ----------------------------------------------------------------

def _reduced_dtype(x: Tensor, axis):
    """Full reductions return a float64 scalar; partial ones keep the input dtype."""
    return np.float64 if axis is None else x.data.dtype


def sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(_reduced_dtype(x, axis))

    def vjp(g):
        g = g.astype(x.data.dtype)
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = (np.sum(x.data, axis=axis, dtype=np.float64) / n).astype(_reduced_dtype(x, axis))

    def vjp(g):
        g = (g / n).astype(x.data.dtype)
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("mean", np.asarray(out), (x,), vjp)


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries (a float64 scalar)."""
    x64 = x.data.astype(np.float64).ravel()
    out = np.asarray(np.dot(x64, x64))
    return _record("frobenius_sq", out, (x,), lambda g: ((2.0 * g).astype(x.data.dtype) * x.data,))


# -- network layers ------------------------------------------------------------

def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))


def _im2col(xp: np.ndarray, spatial) -> np.ndarray:
    """(B, C, D+2, H+2, W+2) -> (B, C*27, D*H*W), taps ordered (kd, kh, kw)."""
    B, C = xp.shape[:2]
    D, H, W = spatial
    cols = np.empty((B, C, 27, D, H, W), dtype=xp.dtype)
    t = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                cols[:, :, t] = xp[:, :, a:a + D, b:b + H, c:c + W]
                t += 1
    return cols.reshape(B, C * 27, D * H * W)


def _col2im(dcols: np.ndarray, C: int, spatial) -> np.ndarray:
    B = dcols.shape[0]
    D, H, W = spatial
    dcols = dcols.reshape(B, C, 27, D, H, W)
    dxp = np.zeros((B, C, D + 2, H + 2, W + 2), dtype=dcols.dtype)
    t = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                dxp[:, :, a:a + D, b:b + H, c:c + W] += dcols[:, :, t]
                t += 1
    return dxp[:, :, 1:-1, 1:-1, 1:-1]


def _batch_chunks(B: int, per_item_bytes: int):
    step = max(1, _CONV_CHUNK_BYTES // max(per_item_bytes, 1))
    return [slice(i, min(i + step, B)) for i in range(0, B, step)]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1 (cross-correlation, as in torch)."""
    if x.ndim != 5 or weight.shape[1:] != (x.shape[1], 3, 3, 3) or bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    B, C, D, H, W = x.shape
    O = weight.shape[0]
    spatial = (D, H, W)
    dtype = _result_dtype(x, weight, bias)
    xd = x.data.astype(dtype, copy=False)
    wmat = weight.data.reshape(O, C * 27).astype(dtype, copy=False)
    chunks = _batch_chunks(B, C * 27 * D * H * W * np.dtype(dtype).itemsize)
    out = np.empty((B, O, D * H * W), dtype=dtype)
    keep_cols = len(chunks) == 1
    cols_cache = None
    for s in chunks:
        cols = _im2col(_pad1(xd[s]), spatial)
        out[s] = np.matmul(wmat, cols)
        if keep_cols:
            cols_cache = cols
    out += bias.data.astype(dtype)[:, None]
    out = out.reshape(B, O, D, H, W)

    def vjp(g):
        gm = g.reshape(B, O, D * H * W)
        gb = gm.sum(axis=(0, 2), dtype=np.float64).astype(dtype)
        gw = np.zeros((O, C * 27), dtype=np.float64)
        gx = np.empty((B, C, D, H, W), dtype=dtype) if x.requires_grad else None
        for s in chunks:
            cols = cols_cache if keep_cols else _im2col(_pad1(xd[s]), spatial)
            gw += np.tensordot(gm[s], cols, axes=([0, 2], [0, 2]))
            if gx is not None:
                gx[s] = _col2im(np.matmul(wmat.T, gm[s]), C, spatial)
        return gx, gw.astype(dtype).reshape(weight.shape), gb

    return _record("conv3d", out, (x, weight, bias), vjp)


def maxpool3d(x: Tensor) -> Tensor:
    """Max pooling with kernel 2 and stride 2 in ceil mode.

    An odd spatial size keeps its last partial window (so 1 stays 1). Ties
    route the gradient to the first maximal element in (d, h, w) order.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d needs (B, C, D, H, W), got {x.shape}")
    pad = [(0, 0), (0, 0)] + [(0, s % 2) for s in x.shape[2:]]
    xd = np.pad(x.data, pad, constant_values=-np.inf) if any(p[1] for p in pad) else x.data
    offsets = list(np.ndindex(2, 2, 2))
    views = [xd[:, :, a::2, b::2, c::2] for a, b, c in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def vjp(g):
        gx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        for (a, b, c), v in zip(offsets, views):
            hit = (v == out) & ~taken
            gx[:, :, a::2, b::2, c::2] = np.where(hit, g, 0)
            taken |= hit
        D, H, W = x.shape[2:]
        return (gx[:, :, :D, :H, :W],)

    return _record("maxpool3d", out, (x,), vjp)


def dropout(x: Tensor, p: float, key: tuple[int, ...] | None, training: bool = True) -> Tensor:
    """Inverted dropout. ``key`` (e.g. (seed, layer_id, step)) fully determines the mask."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key or (0,)))))
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(p)
    scale = x.data.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.data.dtype) * scale
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


class BatchNormState:
    """Running statistics for one batchnorm layer (float64)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm3d(x: Tensor, weight: Tensor, bias: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel normalization over (batch, depth, height, width), then scale and shift.

    Training mode normalizes with biased batch statistics and updates the
    running estimates (unbiased variance) with the configured momentum.
    Statistics and all reductions accumulate in float64.
    """
    if x.ndim != 5 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm3d: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    axes = (0, 2, 3, 4)
    dtype = _result_dtype(x, weight, bias)
    xd = x.data.astype(dtype, copy=False)
    bshape = (1, -1, 1, 1, 1)
    n = x.data.size // x.shape[1]
    if training:
        if n < 2:
            raise ShapeError("batchnorm3d in training mode needs more than one value per channel")
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu.astype(dtype).reshape(bshape)) * inv_std.astype(dtype).reshape(bshape)
    gamma = weight.data.astype(dtype)
    out = xhat * gamma.reshape(bshape) + bias.data.astype(dtype).reshape(bshape)

    def vjp(g):
        gbeta = g.sum(axis=axes, dtype=np.float64)
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        scale = (gamma.astype(np.float64) * inv_std).astype(dtype).reshape(bshape)
        if training:
            # dxhat = g * gamma; dx = inv_std/n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
            c1 = (gbeta / n).astype(dtype).reshape(bshape)
            c2 = (ggamma / n).astype(dtype).reshape(bshape)
            gx = scale * (g - c1 - xhat * c2)
        else:
            gx = g * scale
        return gx, ggamma.astype(dtype), gbeta.astype(dtype)

    return _record("batchnorm3d", out, (x, weight, bias), vjp)


# -- losses --------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= logits.shape[1]:
        raise ValueError("target class index out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    rows = np.arange(B)
    out = np.asarray(-logp[rows, targets].mean())

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return ((p * (float(g) / B)).astype(logits.data.dtype),)

    return _record("softmax_cross_entropy", out, (logits,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data.astype(np.float64) - target
    out = np.asarray((diff * diff).mean())
    n = diff.size
    return _record("mse", out, (pred,), lambda g: ((2.0 * float(g) / n * diff).astype(pred.data.dtype),))


# -- vector neurons ------------------------------------------------------------

VN_EPS = 1e-12


def vn_relu(q: Tensor, k: Tensor) -> Tensor:
    """Vector-neuron ReLU over the last axis (length 3).

    Where <q, k> < 0 the component of q along k is removed; elsewhere, and
    when |k|^2 < 1e-12, q passes through unchanged.
    """
    if q.shape != k.shape or q.shape[-1] != 3:
        raise ShapeError(f"vn_relu: q {q.shape} vs k {k.shape}")
    qd = q.data.astype(np.float64)
    kd = k.data.astype(np.float64)
    dot = (qd * kd).sum(-1, keepdims=True)
    kk = (kd * kd).sum(-1, keepdims=True)
    active = (dot < 0) & (kk >= VN_EPS)
    safe_kk = np.where(active, kk, 1.0)
    coef = np.where(active, dot / safe_kk, 0.0)
    dtype = _result_dtype(q, k)
    out = (qd - coef * kd).astype(dtype)

    def vjp(g):
        g64 = g.astype(np.float64)
        gk_dot = (g64 * kd).sum(-1, keepdims=True)
        gq = g64 - np.where(active, gk_dot / safe_kk, 0.0) * kd
        gk = np.where(active,
                      -(gk_dot * qd + dot * g64) / safe_kk + 2.0 * dot * gk_dot * kd / safe_kk**2,
                      0.0)
        return gq.astype(dtype), gk.astype(dtype)

    return _record("vn_relu", out, (q, k), vjp)


# -- verification and optimization ----------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               n_samples: int | None = None, rng: np.random.Generator | None = None,
               fd_dtype=None) -> float:
    """Compare tape gradients of scalar ``f()`` with central finite differences.

    ``f`` must be deterministic (no dropout, batchnorm in eval mode). Returns
    the max over checked coordinates of |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-8).
    With ``n_samples`` set, that many coordinates are drawn uniformly over all
    parameter entries; otherwise every entry is checked.

    ``fd_dtype`` (e.g. float64) evaluates the finite differences on a shadow
    copy of the parameters at that precision while the analytic gradient keeps
    the parameters' own dtype. A float32 loss is only resolved to ~1e-7
    relative, which caps what a float32 difference quotient can confirm.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[c] for c in sorted(pick)]

    saved = [p.data for p in params]
    ctx = precision(fd_dtype) if fd_dtype is not None else contextlib.nullcontext()
    worst = 0.0
    try:
        if fd_dtype is not None:
            for p in params:
                p.data = p.data.astype(fd_dtype)
        with ctx:
            for i, j in coords:
                flat = params[i].data.reshape(-1)
                orig = flat[j].copy()
                flat[j] = orig + eps
                up = float(f().data)
                flat[j] = orig - eps
                down = float(f().data)
                flat[j] = orig
                g_fd = (up - down) / (2.0 * eps)
                g_ad = float(analytic[i].reshape(-1)[j])
                worst = max(worst, abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-8))
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return worst


class SGD:
    """Stochastic gradient descent with heavy-ball momentum (v = m v + g; p -= lr v).

    With ``clip_norm`` set, the global gradient norm is first rescaled to at
    most that value.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.last_grad_norm = 0.0
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = float(np.sqrt(np.sum([np.dot(g.ravel().astype(np.float64), g.ravel()) for g in grads])))
        self.last_grad_norm = norm
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad if scale == 1.0 else p.grad * p.grad.dtype.type(scale)
            p.data -= p.data.dtype.type(self.lr) * v.astype(p.data.dtype, copy=False)


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.9, state=None):
    """Functional form of one :class:`SGD` step; pass back the returned state."""
    opt = state if state is not None else SGD(params, lr, momentum)
    opt.lr = lr
    opt.step()
    return opt


def lr_schedule(epoch: int, lr_init: float, epochs_per_decade: float, step: int = 1) -> float:
    """Log-stepped decay: every ``step`` epochs multiply by 10^(-step/epochs_per_decade)."""
    if epochs_per_decade <= 0:
        return lr_init
    return lr_init * 10.0 ** (-(epoch // step) * step / epochs_per_decade)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.2,
                    dtype=np.float32) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
