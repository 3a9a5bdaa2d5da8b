"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the CMAE network needs are provided, most of them fused
(dense, conv1d, layer_norm, ...) so the tape stays short. Arrays are float32
for training and inference; building inputs and parameters as float64 gives
a shadow mode used for finite-difference gradient checks.

Each op documents the extra memory it keeps alive for the backward pass.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from .errors import GraphError, NumericalError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf and raises NumericalError."""
    _state.debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff
    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``.

        The tape is released afterwards; a second call raises GraphError.
        """
        if self.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by an earlier backward()")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")

        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # intermediate: release tape and gradient buffer
                node._backward = None
                node._parents = ()
                node._consumed = True
                if node is not self:
                    node.grad = None


class Parameter(Tensor):
    """A named leaf tensor; ``trainable=False`` means no gradient is ever kept."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = bool(trainable)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    if _debug() and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values produced")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._consumed = False
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # the same array may be handed to several parents
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c))


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def average(tensors) -> Tensor:
    """Element-wise mean of same-shaped tensors."""
    tensors = list(tensors)
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"average needs equal shapes, got {[t.shape for t in tensors]}")
    k = len(tensors)
    data = sum(t.data for t in tensors) / k

    def backward(g):
        for t in tensors:
            _accum(t, g / k)

    return _make(data.astype(tensors[0].dtype, copy=False), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` over the last two axes (leading axes broadcast)."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


# --------------------------------------------------------------------------
# activations


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``.
    Keeps one input-sized array for backward."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * dt))

    return _make(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis then apply ``gain`` and ``offset``.
    Keeps the normalized input and per-row inverse std."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + offset.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if offset.requires_grad:
            _accum(offset, g.reshape(-1, xd.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out, (x, gain, offset), backward)


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout; identity at inference or when ``rate == 0``.
    ``rng`` is a numpy Generator or an int seed."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape, dtype=np.float64) >= rate)
    m = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * m, (x,), lambda g: _accum(x, g * m))


# --------------------------------------------------------------------------
# layers


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; ids ``[batch, len]`` -> ``[batch, len, dim]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"token id out of range for embedding with {weight.shape[0]} rows")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accum(weight, gw)

    return _make(weight.data[ids], (weight,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ w + b``."""
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(f"dense: x {x.shape}, w {w.shape}, b {None if b is None else b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))

    return _make(y.reshape(lead + (w.shape[1],)), parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Length-preserving 1-D cross-correlation.

    ``x [batch, len, in]``, ``w [k, in, out]``:
    ``y[b, t, o] = sum_{j, i} x[b, t + j - k//2, i] * w[j, i, o] + bias[o]``
    with out-of-range positions read as zero. Keeps a ``[batch*len, k*in]``
    column buffer for backward.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[2],):
        raise ShapeError(f"conv1d: bias {b.shape} vs {w.shape[2]} filters")
    B, L, C = x.shape
    k, _, O = w.shape
    if L < 1:
        raise ShapeError("conv1d needs len >= 1")
    left = k // 2
    xp = np.zeros((B, L + k - 1, C), dtype=x.dtype)
    xp[:, left:left + L] = x.data
    cols = np.empty((B, L, k, C), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, j:j + L, :]
    cols = cols.reshape(B * L, k * C)
    w2 = w.data.reshape(k * C, O)
    y = cols @ w2
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(B * L, O)
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(k, C, O))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            gc = (g2 @ w2.T).reshape(B, L, k, C)
            gxp = np.zeros((B, L + k - 1, C), dtype=x.dtype)
            for j in range(k):
                gxp[:, j:j + L, :] += gc[:, :, j, :]
            _accum(x, gxp[:, left:left + L])

    return _make(y.reshape(B, L, O), parents, backward)


def maxpool1d(x: Tensor, pool: int = 2) -> Tensor:
    """Non-overlapping max pooling over time, trailing remainder dropped.
    Ties route the gradient to the first index of the window."""
    B, L, C = x.shape
    if L < pool:
        raise ShapeError(f"maxpool1d needs len >= {pool}, got {L}")
    Lo = L // pool
    xr = x.data[:, : Lo * pool].reshape(B, Lo, pool, C)
    arg = xr.argmax(axis=2)
    y = np.take_along_axis(xr, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(g):
        gr = np.zeros((B, Lo, pool, C), dtype=x.dtype)
        np.put_along_axis(gr, arg[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, : Lo * pool] = gr.reshape(B, Lo * pool, C)
        _accum(x, gx)

    return _make(y, (x,), backward)


def global_maxpool1d(x: Tensor) -> Tensor:
    """Per-channel max over time: ``[batch, len, ch] -> [batch, ch]``."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"global_maxpool1d needs [batch, len>=1, ch], got {x.shape}")
    arg = x.data.argmax(axis=1)
    y = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        _accum(x, gx)

    return _make(y, (x,), backward)


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table: even columns ``sin(t / 10000^(2i/d))``, odd columns the cosine."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)


def multi_head_attention(x: Tensor, params: dict, heads: int, return_weights: bool = False):
    """Unmasked multi-head self-attention.

    ``params`` holds ``wq, bq, wk, bk, wv, bv`` (``[d, d]`` / ``[d]``) and the
    output projection ``wo, bo``. Each head uses ``d // heads`` dimensions and
    scaled dot-product scores. Keeps ``[batch, heads, len, len]`` weights.
    """
    B, L, D = x.shape
    if D % heads:
        from .errors import ConfigError

        raise ConfigError(f"d_model {D} not divisible by {heads} heads")
    dk = D // heads

    def split(t):
        return transpose(reshape(t, (B, L, heads, dk)), (0, 2, 1, 3))

    q = split(dense(x, params["wq"], params["bq"]))
    k = split(dense(x, params["wk"], params["bk"]))
    v = split(dense(x, params["wv"], params["bv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = softmax(scores)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = dense(reshape(ctx, (B, L, D)), params["wo"], params["bo"])
    return (out, weights.data) if return_weights else out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-ln p[label]`` with ``p`` clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(labels) != probs.shape[0]:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs {len(labels)} labels")
    n = len(labels)
    rows = np.arange(n)
    p = probs.data[rows, labels]
    pc = np.maximum(p, 1e-12)
    loss = np.asarray(-np.log(pc).mean(), dtype=probs.dtype)

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(p >= 1e-12, -1.0 / (pc * n), 0.0) * g
        _accum(probs, gp)

    return _make(loss, (probs,), backward)


# --------------------------------------------------------------------------
# checking


def numerical_grad(f, arrays, h: float = 1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (modified in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
