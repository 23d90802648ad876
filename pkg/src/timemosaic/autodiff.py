"""Minimal deterministic reverse-mode autodiff over dense float64 arrays.

A ``Tape`` records operations in execution order while it is active; calling
``backward`` on a scalar output replays the recorded nodes in reverse and
accumulates gradients into every reachable leaf with ``requires_grad``.
Without an active tape the same operations run as plain numpy, which is how
evaluation-mode forward passes avoid graph bookkeeping.

All arrays are float64. Determinism contract: the same program with the same
seed produces bit-identical value buffers.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "DomainError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "softmax",
    "layer_norm",
    "relu",
    "mean",
    "tsum",
    "square",
    "sqrt",
    "tlog",
    "texp",
    "broadcast_to",
    "repeat_rows",
    "detach",
    "backward",
    "check_gradient",
    "uniform_init",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class ContractError(RuntimeError):
    """Raised on misuse of the tape/backward API."""


class DomainError(ValueError):
    """Raised when an op is applied outside its mathematical domain."""


_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tape:
    """Append-only record of one differentiable program.

    Usable as a context manager; while active, any op whose inputs require
    grad appends a node. Node order is execution order, which is already a
    topological order, so backward is a single reverse sweep.
    """

    def __init__(self, rng_seed: int = 0):
        self.nodes: list["_Node"] = []
        self.rng_seed = rng_seed
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("nested tapes are not supported")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False


class _Node:
    __slots__ = ("out", "parents", "vjps")

    def __init__(self, out, parents, vjps):
        self.out = out
        self.parents = parents
        self.vjps = vjps  # one callable per parent: grad_out -> grad_parent


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; the named functions below are the primitive set.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents, vjps):
    tape = _active_tape()
    if tape is None or tape._consumed:
        return out
    if not any(p.requires_grad or p.node_id is not None for p in parents):
        return out
    out.requires_grad = True
    out.node_id = len(tape.nodes)
    tape.nodes.append(_Node(out, tuple(parents), tuple(vjps)))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul_elementwise", a, b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul: operands must have ndim >= 1, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(ga, a.shape)

    def grad_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    return _record(out, (a, b), (grad_a, grad_b))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.data.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got shape {a.shape}")
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), (lambda g: np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), (lambda g: g.reshape(a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        return full

    return _record(out, (a,), (vjp,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise DomainError(f"softmax: axis of extent 0 in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - dot)

    return _record(out, (a,), (vjp,))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)
    n = a.shape[-1]

    def vjp(g):
        return inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))

    return _record(out, (a,), (vjp,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), (lambda g: g * mask,))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size / out.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape) / count

    return _record(out, (a,), (vjp,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _record(out, (a,), (vjp,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), (lambda g: g * 2.0 * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), (lambda g: g * 0.5 / np.maximum(y, 1e-300),))


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), (lambda g: g / a.data,))


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), (lambda g: g * y,))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(np.broadcast_to(a.data, shape).copy())
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record(out, (a,), (lambda g: _unbroadcast(g, a.shape),))


def repeat_rows(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``repeats`` times consecutively."""
    if repeats < 1:
        raise ShapeError(f"repeat_rows: repeats must be >= 1, got {repeats}")
    out = Tensor(np.repeat(a.data, repeats, axis=axis))
    ax = axis % a.data.ndim

    def vjp(g):
        new_shape = g.shape[:ax] + (a.shape[ax], repeats) + g.shape[ax + 1 :]
        return g.reshape(new_shape).sum(axis=ax + 1)

    return _record(out, (a,), (vjp,))


def detach(a: Tensor) -> Tensor:
    """Forward identity, gradient barrier."""
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# backward and verification


def backward(output: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf.

    ``output`` must be scalar (one element) and recorded on the active tape.
    A tape can be consumed only once.
    """
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward: no active tape")
    if tape._consumed:
        raise ContractError("backward: tape already consumed; build a fresh tape")
    if output.size != 1:
        raise ContractError(f"backward: output must be scalar, got shape {output.shape}")
    if output.node_id is None:
        raise ContractError("backward: output was not recorded on the tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.data)}
    for node in reversed(tape.nodes[: output.node_id + 1]):
        g = grads.pop(node.out.node_id, None)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            if parent.node_id is not None:
                acc = grads.get(parent.node_id)
                grads[parent.node_id] = pg if acc is None else acc + pg
            elif parent.requires_grad:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def check_gradient(f, points, tol: float = 1e-4, h: float = 1e-5) -> dict:
    """Compare analytic gradients of scalar program ``f`` with central differences.

    ``points`` is a leaf Tensor or list of leaf Tensors (all requires_grad).
    Returns a report dict with ``max_rel_err`` and ``passed``.
    """
    if isinstance(points, Tensor):
        points = [points]
    for p in points:
        p.requires_grad = True
        p.zero_grad()

    with Tape():
        out = f(*points)
        if not np.isfinite(out.data).all():
            raise DomainError("check_gradient: f(point) is not finite")
        backward(out)

    max_rel = 0.0
    for p in points:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(*points).data)
            flat[i] = orig - h
            lo = float(f(*points).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * h)
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        rel = np.abs(analytic - numeric).max(initial=0.0) / denom
        max_rel = max(max_rel, float(rel))
    return {"max_rel_err": max_rel, "passed": max_rel <= tol, "tol": tol}


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) parameter tensor."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
