"""Dense float64 tensors with a small define-by-run reverse-mode engine.

Only the operations the forecasting model needs are provided.  Every
operation on a :class:`Tensor` that requires gradients is appended to the
active :class:`Tape`; :func:`backward` walks that tape in reverse.

Model activations follow a ``(..., series, step, channel)`` layout, i.e. a
(possibly batched) ``N x T x d`` block.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the nodes produced while the tape is active.

    Use as a context manager; tapes nest, and each thread has its own stack
    so workers never share a tape.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (),
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    out = Tensor(value, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, "div", (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value ** exponent, "pow", (a,),
                 lambda g: (g * exponent * a.value ** (exponent - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.value), "abs", (a,), lambda g: (g * np.sign(a.value),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, ax1, ax2), "swapaxes", (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _make(out, "concat", ts, backward)


def gather(a, index: np.ndarray) -> Tensor:
    """``out[...] = a.flat[index[...]]`` with ``index == -1`` producing 0.

    Used to scatter a small block of weights into a structured map.
    """
    a = as_tensor(a)
    index = np.asarray(index)
    valid = index >= 0
    flat = a.value.reshape(-1)
    out = np.where(valid, flat[np.where(valid, index, 0)], 0.0)

    def backward(g):
        ga = np.zeros(flat.size)
        np.add.at(ga, index[valid], g[valid])
        return (ga.reshape(a.shape),)

    return _make(out, "gather", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), backward)


def masked_row_softmax(logits, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0.

    Every row must keep at least one entry.  Rows are stabilised by
    subtracting the row maximum over the kept entries.
    """
    w = as_tensor(logits)
    if mask is None:
        mask = np.ones(w.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), w.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_row_softmax: a row has no unmasked entries")
    z = np.where(mask, w.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (w,), backward)


def causal_conv1d(x, kernel, bias) -> Tensor:
    """Causal 1-D convolution along the step axis.

    ``x`` is ``(..., T, C_in)``, ``kernel`` is ``(k, C_in, C_out)`` and
    ``bias`` is ``(C_out,)``.  The input is left-padded with ``k - 1`` zero
    steps so the output keeps length ``T``::

        out[t, o] = bias[o] + sum_j sum_c kernel[j, c, o] * x[t - k + 1 + j, c]
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k, c_in, c_out = kernel.shape
    if k < 1 or x.shape[-1] != c_in or bias.shape != (c_out,):
        raise ValueError(f"causal_conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}, "
                         f"bias {bias.shape}")
    steps = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.value, pad)
    out = np.broadcast_to(bias.value, x.shape[:-1] + (c_out,)).copy()
    for j in range(k):
        out += xp[..., j:j + steps, :] @ kernel.value[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.value)
        g2 = g.reshape(-1, c_out)
        for j in range(k):
            gxp[..., j:j + steps, :] += g @ kernel.value[j].T
            gk[j] = xp[..., j:j + steps, :].reshape(-1, c_in).T @ g2
        return gxp[..., k - 1:, :], gk, g2.sum(axis=0)

    return _make(out, "causal_conv1d", (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# backpropagation


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns the gradient of every leaf reached.

    Leaf tensors also get their ``.grad`` attribute set (overwritten, not
    accumulated across calls).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return {}
    grads[id(loss)] = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if parent.backward_fn is None:
                leaves[key] = parent
            grads[key] = grads[key] + pg if key in grads else pg
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = grads[key]
    return result


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients comparable."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], point: Sequence[np.ndarray],
               h: float = 1e-5, tol: float = 1e-6,
               coords: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``point`` is a list of arrays, one per argument of ``f``.  ``coords``
    optionally restricts the numeric check to a subset of flat indices per
    argument.
    """
    leaves = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    with Tape() as tape:
        loss = f(leaves)
    grads = backward(tape, loss)
    analytic, numeric = [], []
    for i, leaf in enumerate(leaves):
        g = grads.get(leaf, np.zeros(leaf.shape)).reshape(-1)
        idx = np.arange(leaf.value.size) if coords is None else np.asarray(coords[i])
        base = np.array(point[i], dtype=np.float64)
        for j in idx:
            vals = []
            for step in (h, -h):
                moved = base.copy().reshape(-1)
                moved[j] += step
                args = [Tensor(p) for p in point]
                args[i] = Tensor(moved.reshape(base.shape))
                vals.append(float(f(args).value))
            numeric.append((vals[0] - vals[1]) / (2 * h))
            analytic.append(g[j])
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    err = float(relative_error(analytic, numeric).max()) if analytic.size else 0.0
    return GradCheckReport(analytic, numeric, err, tol)


def parameters_grad_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
