"""Dense tensors with reverse-mode automatic differentiation.

Every operation here takes :class:`Tensor` inputs and returns a new
:class:`Tensor`.  When any input requires a gradient, the result keeps a
reference to its parents and a closure that maps the output gradient to
input gradients.  :meth:`Tensor.backward` walks that graph once in reverse
topological order.

Arithmetic follows the dtype of the inputs.  Model code uses float32; the
gradient checks in the test-suite feed float64 arrays through the same code
paths so that finite differences are accurate enough to compare against.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient.  ``self`` must be a scalar unless ``grad`` is
        given."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar used by tests and small scripts
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


def where(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``condition`` holds and ``b`` elsewhere.

    ``condition`` is a plain boolean array broadcastable to the operands.
    """
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        ga = _unbroadcast(np.where(cond, g, zero), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, zero, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _result(np.ascontiguousarray(x.data.T), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    out = x.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _result(np.ascontiguousarray(out), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(out, (table,), backward)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a matrix and ``a`` has any leading extents."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis, times ``gain``."""
    if eps <= 0:
        raise ValueError(f"rms_norm eps must be positive, got {eps}")
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ValueError(f"rms_norm gain shape {gain.shape} does not match input {x.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + xd.dtype.type(eps))
    normed = xd * inv
    out = normed * gain.data

    def backward(g):
        gx = ggain = None
        if x.requires_grad:
            gn = g * gain.data
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * normed).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, ggain

    return _result(out, (x, gain), backward)


def causal_depthwise_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution along the time axis.

    ``x`` is ``(..., T, C)`` and ``kernel`` is ``(K, C)``.  ``kernel[K-1]``
    weights the current step, ``kernel[0]`` the step ``K-1`` back; the input
    is zero-padded on the left so that output ``t`` only sees ``x[t-K+1..t]``.
    """
    if kernel.data.ndim != 2 or x.data.ndim < 2:
        raise ValueError(f"causal_depthwise_conv expects x (..., T, C) and kernel (K, C), got {x.shape}, {kernel.shape}")
    if kernel.shape[1] != x.shape[-1]:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]} channels, kernel has {kernel.shape[1]}")
    width = kernel.shape[0]
    steps = x.shape[-2]
    pad = [(0, 0)] * x.data.ndim
    pad[-2] = (width - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(width):
        out += xp[..., j : j + steps, :] * kernel.data[j]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(width):
                gp[..., j : j + steps, :] += g * kernel.data[j]
            gx = gp[..., width - 1 :, :]
        if kernel.requires_grad:
            gk = np.stack(
                [(g * xp[..., j : j + steps, :]).reshape(-1, x.shape[-1]).sum(axis=0) for j in range(width)]
            )
        return gx, gk

    return _result(out, (x, kernel), backward)


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype=DEFAULT_DTYPE):
    """Cosine/sine tables of shape ``positions.shape + (head_dim // 2,)``."""
    if head_dim % 2:
        raise ValueError(f"rotary encoding needs an even head dimension, got {head_dim}")
    inv_freq = 1.0 / (base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    angles = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def causal_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    positions: np.ndarray,
    rope_base: float,
) -> Tensor:
    """Multi-head causal self-attention with rotary position encoding.

    ``q``, ``k``, ``v`` are ``(B, T, d)`` projections; the result is the
    concatenation of head outputs, ``(B, T, d)``, before the output
    projection.  ``positions`` is ``(T,)`` or ``(B, T)``.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ValueError(f"attention expects equal (B, T, d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    bsz, steps, width = q.shape
    if width % n_heads:
        raise ValueError(f"d_model {width} not divisible by n_heads {n_heads}")
    hd = width // n_heads
    dtype = q.data.dtype

    pos = np.broadcast_to(np.asarray(positions), (bsz, steps))
    cos, sin = rope_tables(pos, hd, rope_base, dtype)
    cos, sin = cos[:, None], sin[:, None]  # (B, 1, T, hd/2)

    def heads(a):
        return a.reshape(bsz, steps, n_heads, hd).transpose(0, 2, 1, 3)

    qh = _rotate(heads(q.data), cos, sin)
    kh = _rotate(heads(k.data), cos, sin)
    vh = heads(v.data)
    inv_scale = dtype.type(1.0 / math.sqrt(hd))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * inv_scale
    future = np.triu(np.ones((steps, steps), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = probs @ vh
    out = ctx.transpose(0, 2, 1, 3).reshape(bsz, steps, width)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(bsz, steps, width)

    def backward(g):
        gctx = heads(g)
        gv = probs.transpose(0, 1, 3, 2) @ gctx
        gp = gctx @ vh.transpose(0, 1, 3, 2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gs *= inv_scale
        gqh = gs @ kh
        gkh = gs.transpose(0, 1, 3, 2) @ qh
        # inverse rotation
        gq = _rotate(gqh, cos, -sin)
        gk = _rotate(gkh, cos, -sin)
        return merge(gq), merge(gk), merge(gv)

    return _result(np.ascontiguousarray(out), (q, k, v), backward)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is set.

    Masked-out positions contribute neither loss nor gradient.
    """
    targets = np.asarray(targets)
    mask = np.asarray(loss_mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ValueError(f"targets {targets.shape} / mask {mask.shape} must match logits leading shape {lead}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every position is masked out")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    rows = np.flatnonzero(mask.reshape(-1))
    tgt = targets.reshape(-1)[rows]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    logp = log_softmax(flat[rows])
    loss = -logp[np.arange(rows.size), tgt].sum() / count

    def backward(g):
        grad = np.zeros_like(flat)
        sub = np.exp(logp)
        sub[np.arange(rows.size), tgt] -= 1.0
        grad[rows] = sub * (g / count)
        return (grad.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` w.r.t. ``array`` (mutated in place, restored)."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a|| + ||n||, tiny)``."""
    diff = np.linalg.norm(np.asarray(analytic, np.float64) - numeric)
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(denom, 1e-30))


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-3,
) -> dict[int, float]:
    """Compare autodiff gradients of ``loss_fn()`` with central differences.

    Returns the relative error per parameter, keyed by position in ``params``.
    """
    params = list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = {}
    for i, p in enumerate(params):
        numeric = numerical_gradient(lambda: float(loss_fn().data), p.data, step)
        errors[i] = relative_error(analytic[i], numeric)
    return errors
