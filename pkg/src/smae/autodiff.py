"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is 64-bit and deterministic: ops are recorded on an explicitly
scoped :class:`Tape` and replayed in reverse topological order, so identical
tapes produce bit-identical gradients. Broadcasting is supported only to the
extent the model needs it (bias adds, scalar scaling, token tiling); the
gradient of a broadcast operand is reduced back to its original shape.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_uid_counter = itertools.count()

# The active tape, if any. Tapes are single-threaded builders: at most one
# may be open at a time and ops silently skip recording when none is open.
_active_tape: "Tape | None" = None

# When enabled, every op asserts its output is finite (debug aid).
_check_finite = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """Immutable dense array of float64 values.

    A tensor may carry a node reference when it was produced by an op under
    an open tape; leaf tensors with ``requires_grad=True`` are the points
    gradients are reported for.
    """

    __slots__ = ("data", "requires_grad", "uid", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)
        self.node: "_Node | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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


class _Node:
    __slots__ = ("tape", "inputs", "needs", "backward")

    def __init__(self, tape, inputs, needs, backward):
        self.tape = tape
        self.inputs = inputs
        self.needs = needs
        self.backward = backward


class Tape:
    """Records ops in construction order for one loss evaluation.

    Use as a context manager around the forward pass, then call
    :meth:`gradients` with the scalar loss and the tensors of interest.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, _Node]] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar loss for each tensor in ``wrt``.

        Tensors never reached from the loss get zero gradients. Works for
        leaves (parameters) and for intermediate tensors recorded on this
        tape (used by attribution).
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        wanted = {t.uid for t in wrt}
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for out, node in reversed(self._nodes):
            g = grads.get(out.uid)
            if g is None:
                continue
            if out.uid not in wanted:
                del grads[out.uid]
            partials = node.backward(g)
            for inp, need, gi in zip(node.inputs, node.needs, partials):
                if not need or gi is None:
                    continue
                acc = grads.get(inp.uid)
                grads[inp.uid] = gi if acc is None else acc + gi
        out_grads = []
        for t in wrt:
            g = grads.get(t.uid)
            out_grads.append(np.zeros_like(t.data) if g is None else np.asarray(g))
        return out_grads


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> dict[int, Tensor]:
    """Gradient map ``tensor uid -> gradient`` for the given parameters."""
    grads = tape.gradients(loss, params)
    return {p.uid: Tensor(g) for p, g in zip(params, grads)}


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    tape = _active_tape
    if tape is None:
        return out
    needs = tuple(
        t.requires_grad or (t.node is not None and t.node.tape is tape) for t in inputs
    )
    if not any(needs):
        return out
    node = _Node(tape, inputs, needs, backward_fn)
    out.node = node
    tape._nodes.append((out, node))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient produced under broadcasting back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2D+ operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} vs {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), bw)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.reshape(x.data, shape))

    def bw(g):
        return (np.reshape(g, x.shape),)

    return _record(out, (x,), bw)


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy())

    def bw(g):
        return (_unbroadcast(g, x.shape),)

    return _record(out, (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), bw)


def take_rows(x, indices) -> Tensor:
    """Gather along the second-to-last axis.

    Supports a shared 1D index vector (same rows for every batch element) or
    a per-batch 2D index array. The gradient scatter-adds into the source.
    """
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.ndim == 2 and idx.ndim == 1:
        out = Tensor(x.data[idx])

        def bw(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            return (z,)

    elif x.ndim == 2 and idx.ndim == 2:
        out = Tensor(x.data[idx])

        def bw(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx.ravel(), g.reshape(-1, x.shape[-1]))
            return (z,)

    elif x.ndim == 3 and idx.ndim == 1:
        out = Tensor(x.data[:, idx])

        def bw(g):
            z = np.zeros_like(x.data)
            np.add.at(z, (slice(None), idx), g)
            return (z,)

    elif x.ndim == 3 and idx.ndim == 2:
        batch = np.arange(x.shape[0])[:, None]
        out = Tensor(x.data[batch, idx])

        def bw(g):
            z = np.zeros_like(x.data)
            np.add.at(z, (batch, idx), g)
            return (z,)

    else:
        raise ShapeError(f"take_rows: unsupported shapes {x.shape} with indices {idx.shape}")
    return _record(out, (x,), bw)


# `sum` and `mean` intentionally shadow the builtins within this module.

def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _record(out, (x,), bw)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    count = x.size if axis is None else x.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, x.shape).copy(),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(ls)

    def bw(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU activation, tanh approximation."""
    x = _as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check_report(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
) -> list[float]:
    """Per-parameter max relative error of tape gradients vs central differences.

    ``f`` must rebuild its computation from the given parameter list on every
    call; finite-difference evaluations run without a tape.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = list(params)
    with Tape() as tape:
        loss = f(params)
        ad_grads = tape.gradients(loss, params)
    report = []
    for k, (p, ga) in enumerate(zip(params, ad_grads)):
        worst = 0.0
        flat = p.data.ravel()
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            plus = _eval_with(f, params, k, bumped.reshape(p.shape))
            bumped[i] = flat[i] - eps
            minus = _eval_with(f, params, k, bumped.reshape(p.shape))
            fd = (plus - minus) / (2.0 * eps)
            a = float(ga.ravel()[i])
            rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            worst = max(worst, rel)
        report.append(worst)
    return report


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error over all parameter coordinates (see grad_check_report)."""
    report = grad_check_report(f, params, eps)
    return max(report) if report else 0.0


def _eval_with(f, params, index, new_data) -> float:
    replaced = list(params)
    replaced[index] = Tensor(new_data, requires_grad=True)
    return float(f(replaced).data)
