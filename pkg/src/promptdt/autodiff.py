"""Dense tensors with reverse-mode automatic differentiation.

A global tape records one node per differentiable op, in execution order.
``backward`` replays the tape in reverse and accumulates gradients into the
``grad`` field of every tensor that requires them. The tape is rebuilt on
every forward pass; there is no persistent graph.

Training runs at float32; the gradient-check suite drives the same ops at
float64. Ops are deliberately coarse (fused softmax, layer norm, masked
attention softmax, cross entropy) so that a transformer step stays BLAS-bound
rather than Python-bound.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional array participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPE: list[_Node] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE)


def clear_tape():
    _TAPE.clear()


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()):
    """Accumulate gradients of a scalar loss into every requires_grad tensor.

    Leaves passed explicitly that the loss does not reach receive zero
    gradients. The tape is consumed: it is cleared on return.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_TAPE):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gin in zip(node.inputs, in_grads):
                if gin is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
            # leaves (never an output of a recorded node) keep their entry
            if node.out.requires_grad and id(node.out) in grads:
                pass
        # whatever remains in the map belongs to leaves
        id_to_tensor = {}
        for node in _TAPE:
            for inp in node.inputs:
                id_to_tensor[id(inp)] = inp
        id_to_tensor[id(loss)] = loss
        for key, g in grads.items():
            t = id_to_tensor.get(key)
            if t is not None and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
    finally:
        _TAPE.clear()
    for t in leaves:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (no gradient for the scalar)."""
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (g * 2.0 * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    from scipy.special import erf  # local import: only used when gelu is configured

    cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
    out = Tensor(x * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    # [..., k] @ [k, n]: flatten the leading axes into a single GEMM instead of
    # numpy's per-slice batched path; this is the dominant op in a step
    if b.data.ndim == 2 and a.data.ndim > 2:
        lead = a.data.shape[:-1]
        k = a.data.shape[-1]
        a2d = a.data.reshape(-1, k)
        out = Tensor((a2d @ b.data).reshape(*lead, b.data.shape[-1]))

        def bwd2d(g):
            ga = gb = None
            g2d = g.reshape(-1, b.data.shape[-1])
            if a.requires_grad:
                ga = (g2d @ b.data.T).reshape(a.data.shape)
            if b.requires_grad:
                gb = a2d.T @ g2d
            return (ga, gb)

        return _record(out, (a, b), bwd2d)
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def index_select(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis; backward scatter-adds."""
    idx = np.asarray(indices)
    out = Tensor(np.take(a.data, idx, axis=axis))

    unique = idx.ndim == 1 and np.unique(idx).size == idx.size

    def bwd(g):
        ga = np.zeros_like(a.data)
        if unique:  # plain scatter; np.add.at is very slow
            np.moveaxis(ga, axis, 0)[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record(out, (a,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into a [V, d] table; ids may be any integer shape."""
    idx = np.asarray(ids)
    out = Tensor(table.data[idx])

    def bwd(g):
        flat_idx = idx.reshape(-1)
        g2d = g.reshape(-1, table.data.shape[-1])
        v = table.data.shape[0]
        if flat_idx.size * v <= 1 << 26:
            # scatter-add as a one-hot GEMM: far faster than np.add.at
            onehot = np.zeros((flat_idx.size, v), dtype=g2d.dtype)
            onehot[np.arange(flat_idx.size), flat_idx] = 1.0
            return (onehot.T @ g2d,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat_idx, g2d)
        return (gt,)

    return _record(out, (table,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return smul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def masked_softmax(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with keep=False get exactly zero weight.

    ``keep`` is a boolean array broadcastable to x; it is a constant, not a
    tensor. Rows with no kept position are a caller error.
    """
    neg = np.where(keep, x.data, -np.inf)
    z = neg - neg.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def masked_log_softmax(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """log softmax restricted to positions with keep=True.

    Entries with keep=False come back as exactly 0.0 and carry zero gradient;
    callers must not select them as log-probabilities.
    """
    neg = np.where(keep, x.data, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    z = neg - m
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.where(keep, z - np.log(s), 0.0))
    soft = e / s

    def bwd(g):
        gx = g - soft * g.sum(axis=axis, keepdims=True)
        return (np.where(keep, gx, 0.0),)

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    soft = np.exp(out.data)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if x.data.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.einsum("...i,...i->...", xc, xc)[..., None] * (1.0 / x.data.shape[-1])
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.data.shape[-1]

    def bwd(g):
        gx = gg = gb = None
        dxhat = g * gain.data
        if x.requires_grad:
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            gx = inv / n * (n * dxhat - s1 - xhat * s2)
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.data.shape)
        return (gx, gg, gb)

    return _record(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if p <= 0.0:
        return x
    u = rng.random(x.data.shape, dtype=np.float32 if x.data.dtype == np.float32 else np.float64)
    keep = (u >= p).astype(x.data.dtype) / (1.0 - p)
    out = Tensor(x.data * keep)
    return _record(out, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log likelihood of integer targets under softmax(logits)."""
    idx = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects [N, C] logits")
    n = logits.data.shape[0]
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = Tensor(np.asarray(-logp[np.arange(n), idx].mean(), dtype=logits.dtype))

    def bwd(g):
        soft = np.exp(logp)
        soft[np.arange(n), idx] -= 1.0
        return (g * soft / n,)

    return _record(out, (logits,), bwd)


def check_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        from .errors import NonFiniteLossError

        raise NonFiniteLossError(f"{what} contains NaN or Inf")
    return t
