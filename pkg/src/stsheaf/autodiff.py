"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations applied while a :class:`Tape` is active record themselves on it
whenever an input requires a gradient; :func:`backward` then replays the tape
in reverse. Outside a tape every primitive is a plain forward computation.

No implicit broadcasting: operands of elementwise primitives must have equal
shapes, or one of them must be a scalar. Use :func:`add_bias` and
:func:`expand` for the two explicit broadcast patterns the model needs.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

_TAPES: list["Tape"] = []
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Append-only record of primitive applications; usable for one backward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _record(out, inputs, vjp) -> Tensor:
    # any nan/inf entry makes the sum non-finite
    if CHECK_FINITE and not np.isfinite(np.sum(out)):
        raise FloatingPointError(f"non-finite value produced by {vjp.__qualname__.split('.')[0]}")
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(_needs(t) for t in inputs)
    res = Tensor(out, requires_grad=track)
    if track:
        tape.nodes.append((res, inputs, vjp))
    return res


def backward(tape: Tape, loss: Tensor, wrt=None) -> dict:
    """Gradients of scalar ``loss`` keyed by leaf tensor.

    Every requires-grad leaf seen on the tape (or every tensor in ``wrt``) gets
    an entry; leaves the loss does not depend on get zeros.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(node[0]) for node in tape.nodes}
    leaves = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for _, inputs, _ in tape.nodes:
        for t in inputs:
            if _needs(t) and id(t) not in produced:
                leaves[id(t)] = t
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not _needs(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    tape.consumed = True
    tape.nodes = []
    targets = wrt if wrt is not None else leaves.values()
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in targets}


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _scalar_or_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def _fit(g, shape):
    return g if g.shape == shape else g.sum().reshape(shape)


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _scalar_or_same(a, b, "add")

    def add_vjp(g):
        return _fit(g, a.shape), _fit(g, b.shape)

    return _record(a.data + b.data, (a, b), add_vjp)


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _scalar_or_same(a, b, "sub")

    def sub_vjp(g):
        return _fit(g, a.shape), _fit(-g, b.shape)

    return _record(a.data - b.data, (a, b), sub_vjp)


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _scalar_or_same(a, b, "mul")

    def mul_vjp(g):
        ga = _fit(g * b.data, a.shape) if _needs(a) else None
        gb = _fit(g * a.data, b.shape) if _needs(b) else None
        return ga, gb

    return _record(a.data * b.data, (a, b), mul_vjp)


def abs_(x) -> Tensor:
    x = _const(x)

    def abs_vjp(g):
        return (g * np.sign(x.data),)

    return _record(np.abs(x.data), (x,), abs_vjp)


def sigmoid(x) -> Tensor:
    x = _const(x)
    y = expit(x.data)

    def sigmoid_vjp(g):
        return (g * y * (1.0 - y),)

    return _record(y, (x,), sigmoid_vjp)


def relu(x) -> Tensor:
    x = _const(x)
    pos = x.data > 0

    def relu_vjp(g):
        return (g * pos,)

    return _record(x.data * pos, (x,), relu_vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape


def _mm(A, B):
    # flatten batch dims against a 2-D right operand: one gemm instead of a loop
    if B.ndim == 2 and A.ndim > 2:
        return (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[-1],))
    if A.ndim == 2 and B.ndim > 2:
        return np.moveaxis(np.tensordot(A, B, axes=([1], [B.ndim - 2])), 0, -2)
    return A @ B


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (..., k, n). Batch dims must match unless one side is 2-D."""
    a, b = _const(a), _const(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def matmul_vjp(g):
        ga = gb = None
        if _needs(a):
            if a.ndim == 2 and g.ndim > 2:
                # sum_batch g_b @ B_b^T
                axes = list(range(g.ndim - 2)) + [g.ndim - 1]
                ga = np.tensordot(g, B, axes=(axes, axes))
            else:
                ga = _mm(g, np.swapaxes(B, -1, -2))
        if _needs(b):
            if b.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _mm(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return _record(_mm(A, B), (a, b), matmul_vjp)


def add_bias(x, bias) -> Tensor:
    """x + bias with bias broadcast along every axis but the last."""
    x, bias = _const(x), _const(bias)
    if bias.shape != x.shape[-1:]:
        raise ValueError(f"add_bias: bias shape {bias.shape} vs input {x.shape}")

    def add_bias_vjp(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if _needs(bias) else None
        return g, gb

    return _record(x.data + bias.data, (x, bias), add_bias_vjp)


def expand(x, lead_shape) -> Tensor:
    """Repeat x over new leading axes: result shape is lead_shape + x.shape."""
    x = _const(x)
    lead_shape = tuple(int(s) for s in lead_shape)
    out = np.broadcast_to(x.data, lead_shape + x.shape).copy()

    def expand_vjp(g):
        return (g.reshape((-1,) + x.shape).sum(axis=0),)

    return _record(out, (x,), expand_vjp)


def reshape(x, shape) -> Tensor:
    x = _const(x)
    out = x.data.reshape(shape)

    def reshape_vjp(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), reshape_vjp)


def transpose(x, axes=None) -> Tensor:
    """Swap the last two axes, or apply an explicit axis permutation."""
    x = _const(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def transpose_vjp(g):
        return (np.transpose(g, inv),)

    return _record(np.transpose(x.data, axes), (x,), transpose_vjp)


def concat(tensors, axis=-1) -> Tensor:
    tensors = tuple(_const(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def concat_vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, concat_vjp)


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = _const(x)

    def slice_vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(x.data[key], (x,), slice_vjp)


def _segment_sum(values, index, num_segments, axis=0, coef=None):
    """out[..., k, ...] = sum_i coef_i * values[..., i, ...] over i with index[i] == k.

    Reduction runs along ``axis`` as one sparse (num_segments x len(index))
    product, so the per-segment summation order is fixed.
    """
    n = len(index)
    coef = np.ones(n) if coef is None else coef
    mat = sp.csr_matrix((coef, (index, np.arange(n))), shape=(num_segments, n))
    moved = np.moveaxis(values, axis, 0)
    rest = moved.shape[1:]
    out = mat @ np.ascontiguousarray(moved).reshape(n, -1)
    return np.moveaxis(out.reshape((num_segments,) + rest), 0, axis)


def gather(x, index, axis=-2) -> Tensor:
    """Select entries along ``axis`` by an integer index vector (repeats allowed)."""
    x = _const(x)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim

    def gather_vjp(g):
        return (_segment_sum(g, index, x.shape[axis], axis),)

    return _record(np.take(x.data, index, axis=axis), (x,), gather_vjp)


def scatter_add_signed(values, src, dst, num_nodes, weight=None, axis=-2) -> Tensor:
    """out_u = sum_{src(e)=u} w_e v_e - sum_{dst(e)=u} w_e v_e along ``axis``.

    ``values`` has the edge axis at ``axis``; the result has ``num_nodes``
    entries there. ``weight`` is a constant per-edge vector (default ones).
    """
    values = _const(values)
    axis = axis % values.ndim
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    n_edges = values.shape[axis]
    if src.shape != (n_edges,) or dst.shape != (n_edges,):
        raise ValueError("scatter_add_signed: index vectors must have one entry per edge")
    w = np.ones(n_edges) if weight is None else np.asarray(weight, dtype=float)
    out = _segment_sum(
        np.concatenate([values.data, values.data], axis=axis),
        np.concatenate([src, dst]),
        num_nodes,
        axis,
        coef=np.concatenate([w, -w]),
    )
    wshape = [1] * values.ndim
    wshape[axis] = n_edges
    w = w.reshape(wshape)

    def scatter_vjp(g):
        return ((np.take(g, src, axis=axis) - np.take(g, dst, axis=axis)) * w,)

    return _record(out, (values,), scatter_vjp)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias): a fused matmul against a 2-D weight."""
    x, weight = _const(x), _const(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} vs weight {weight.shape}")
    inputs = (x, weight)
    if bias is not None:
        bias = _const(bias)
        if bias.shape != weight.shape[1:]:
            raise ValueError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        inputs = (x, weight, bias)
    X = x.data.reshape(-1, x.shape[-1])
    out = X @ weight.data
    if bias is not None:
        out += bias.data

    def linear_vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if _needs(x) else None
        gw = X.T @ g2 if _needs(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if _needs(bias) else None)

    return _record(out.reshape(x.shape[:-1] + weight.shape[1:]), inputs, linear_vjp)


# ---------------------------------------------------------------------------
# normalizations and reductions


def softmax(x) -> Tensor:
    x = _const(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def softmax_vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (x,), softmax_vjp)


def layer_norm(x, gain=None, bias=None, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = _const(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm over an empty axis")
    inputs = [x]
    if gain is not None:
        gain = _const(gain)
        inputs.append(gain)
    if bias is not None:
        bias = _const(bias)
        inputs.append(bias)
    for p in inputs[1:]:
        if p.shape != x.shape[-1:]:
            raise ValueError(f"layer_norm affine shape {p.shape} vs input {x.shape}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data

    def layer_norm_vjp(g):
        gxhat = g * gain.data if gain is not None else g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
        out = [gx]
        flat = g.reshape(-1, g.shape[-1])
        if gain is not None:
            out.append((flat * xhat.reshape(flat.shape)).sum(axis=0))
        if bias is not None:
            out.append(flat.sum(axis=0))
        return tuple(out)

    return _record(y, tuple(inputs), layer_norm_vjp)


def reduce_sum(x, axis=None) -> Tensor:
    x = _const(x)

    def sum_vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(np.sum(x.data, axis=axis), (x,), sum_vjp)


def reduce_mean(x, axis=None) -> Tensor:
    x = _const(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ValueError("mean over an empty axis")

    def mean_vjp(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(np.mean(x.data, axis=axis), (x,), mean_vjp)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_grad(fn, x: np.ndarray, step=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``x`` (x is restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fn()
        flat[i] = old - step
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
