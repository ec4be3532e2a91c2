"""Dense float32 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous numpy array (row-major flat storage).
Operations executed while a ``GradContext`` is active append (output,
inputs, backward-rule) entries to that context's tape; ``backward`` walks
the tape once in reverse, which is a valid reverse topological order
because single-threaded execution order is a topological order.

Kernels are dtype-preserving: float32 is the production default, but
``grad_check`` promotes its probe tensor to float64 so the central
finite-difference quotient is not drowned by float32 cancellation at
small step sizes. Only the finite-difference side is promoted; the
analytic gradient is computed by the ordinary float32 pass.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradContext",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "smul",
    "softmax",
    "layer_norm",
    "gelu",
    "embed_rows",
    "concat",
    "slice_axis",
    "reshape",
    "swap_axes",
    "reduce_sum",
    "reduce_mean",
    "mse",
    "cross_entropy_logits",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation received a tensor containing NaN or infinity."""


class GraphError(RuntimeError):
    """Backward misuse: non-scalar loss, empty tape, or repeated traversal."""


_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Immutable-by-convention dense array plus a requires_grad flag.

    ``data`` is always C-contiguous so ``data.ravel()`` is the row-major
    flat storage; ``shape`` is the list of dimension sizes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=np.float32 if dtype is None else dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Operator sugar maps onto the recorded op family below, so schedule
    # formulas (t*z1 + (1-t)*z0, ...) work on Tensors and ndarrays alike.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not part of the op family")

    def __neg__(self):
        return smul(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


_ACTIVE = threading.local()


def _current_context():
    stack = getattr(_ACTIVE, "stack", None)
    if not stack:
        return None
    return stack[-1]


class GradContext:
    """Tape of recorded operations for one forward/backward pass.

    The tape is append-only during the forward pass; ``backward`` walks it
    exactly once in reverse order, accumulating gradients per recorded
    tensor. One context is single-threaded; distinct contexts on distinct
    threads never share state (the active-context stack is thread-local).
    """

    def __init__(self):
        self._tape: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "GradContext":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = []
            _ACTIVE.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.stack.pop()
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self._tape.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._tape)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate dloss/dt for every recorded tensor; return leaf grads.

        Raises GraphError on a non-scalar loss, an empty tape, or a second
        traversal without re-recording.
        """
        if self._consumed:
            raise GraphError("backward already ran on this context; re-record the graph")
        if not self._tape:
            raise GraphError("empty graph: no operations were recorded")
        if loss.shape != ():
            raise GraphError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
        for out, inputs, backward_fn in reversed(self._tape):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            for inp, g in zip(inputs, backward_fn(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = g if acc is None else acc + g

        result: dict[Tensor, np.ndarray] = {}
        seen: set[int] = set()
        for _, inputs, _ in self._tape:
            for inp in inputs:
                if inp.requires_grad and id(inp) not in seen:
                    seen.add(id(inp))
                    g = grads.get(id(inp))
                    if g is None:
                        g = np.zeros_like(inp.data)
                    result[inp] = np.asarray(g, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = result[inp]
        return result


def _check_finite(name: str, *tensors: Tensor):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{name}: input contains non-finite values")


def _emit(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    ctx = _current_context()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and ctx is not None, dtype=out_data.dtype)
    if ctx is not None and needs:
        ctx._record(out, inputs, backward_fn)
    return out


def _suffix_broadcast_ok(big, small) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# Elementwise / broadcast arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; same shape, or one operand's shape is a trailing suffix of
    the other (broadcast over leading batch dims)."""
    _check_finite("add", a, b)
    if a.shape != b.shape and not (
        _suffix_broadcast_ok(a.shape, b.shape) or _suffix_broadcast_ok(b.shape, a.shape)
    ):
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    out = a.data + b.data

    def backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return _emit("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("sub", a, b)
    if a.shape != b.shape and not (
        _suffix_broadcast_ok(a.shape, b.shape) or _suffix_broadcast_ok(b.shape, a.shape)
    ):
        raise ShapeError(f"sub: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    out = a.data - b.data

    def backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return _emit("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same shape or trailing-suffix broadcast."""
    _check_finite("mul", a, b)
    if a.shape != b.shape and not (
        _suffix_broadcast_ok(a.shape, b.shape) or _suffix_broadcast_ok(b.shape, a.shape)
    ):
        raise ShapeError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _reduce_to_shape(g * b_data, a.shape), _reduce_to_shape(g * a_data, b.shape)

    return _emit("mul", out, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    """Scalar multiple c*a."""
    _check_finite("smul", a)
    if not math.isfinite(c):
        raise NonFiniteError("smul: scalar coefficient is non-finite")
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _emit("smul", out, (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported forms: 2d@2d, nd@2d (shared weights), and
    nd@nd with identical leading batch dims."""
    _check_finite("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = g @ b_data.swapaxes(-1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b_data.ndim == 2 and a_data.ndim > 2:
                k = a_data.shape[-1]
                gb = a_data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = a_data.swapaxes(-1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def embed_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows: out[..., :] = table[ids[...], :]."""
    _check_finite("embed_rows", table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embed_rows: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embed_rows", out, (table,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    _check_finite("reshape", a)
    out = a.data.reshape(shape)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit("reshape", out, (a,), backward)


def swap_axes(a: Tensor, ax0: int, ax1: int) -> Tensor:
    _check_finite("swap_axes", a)
    out = np.ascontiguousarray(a.data.swapaxes(ax0, ax1))

    def backward(g):
        return (g.swapaxes(ax0, ax1),)

    return _emit("swap_axes", out, (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    _check_finite("concat", *parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _emit("concat", out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_finite("slice_axis", a)
    n = a.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] invalid for axis of size {n}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("slice_axis", out, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    _check_finite("softmax", a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _emit("softmax", p, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    _check_finite("gelu", a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * d,)

    return _emit("gelu", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then
    apply learned gain and bias."""
    _check_finite("layer_norm", a, gain, bias)
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({a.shape[-1]},), "
            f"got {tuple(gain.shape)} / {tuple(bias.shape)}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]
    g_data = gain.data

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * g_data
            # d/dx of (x - mu) * inv with mu, inv functions of x
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", out, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor) -> Tensor:
    _check_finite("reduce_sum", a)
    out = a.data.sum()

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _emit("reduce_sum", np.asarray(out, dtype=a.data.dtype), (a,), backward)


def reduce_mean(a: Tensor) -> Tensor:
    _check_finite("reduce_mean", a)
    n = a.size
    out = a.data.mean()

    def backward(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),)

    return _emit("reduce_mean", np.asarray(out, dtype=a.data.dtype), (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2; differentiable in both sides."""
    _check_finite("mse", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    diff = a.data - b.data
    n = a.size
    out = np.asarray((diff * diff).mean(), dtype=diff.dtype)

    def backward(g):
        base = (2.0 / n) * diff * g
        return base.astype(diff.dtype), (-base).astype(diff.dtype)

    return _emit("mse", out, (a, b), backward)


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy between softmax(logits) and integer targets.

    logits: (..., V); targets: integer array of shape (...). Fused with
    log-softmax for stability.
    """
    _check_finite("cross_entropy_logits", logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_logits: targets shape {targets.shape} does not match "
            f"logits leading shape {tuple(logits.shape[:-1])}"
        )
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy_logits: target id out of range for {v} classes")
    x = logits.data.reshape(-1, v)
    ids = targets.reshape(-1)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = x[np.arange(x.shape[0]), ids]
    n = x.shape[0]
    out = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def backward(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        p[np.arange(n), ids] -= 1.0
        p *= g / n
        return (p.reshape(logits.shape).astype(x.dtype),)

    return _emit("cross_entropy_logits", out, (logits,), backward)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between the analytic gradient of scalar f at x
    and central finite differences with step h.

    Per-coordinate error is |analytic - (f(x+h e_i) - f(x-h e_i)) / 2h|
    divided by (|analytic| + 1e-8). The difference quotient is evaluated
    with x promoted to float64 (see module docstring).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    with GradContext() as ctx:
        loss = f(probe)
        if loss.shape != ():
            raise GraphError(f"grad_check: f must be scalar-valued, got shape {tuple(loss.shape)}")
        grads = ctx.backward(loss)
    analytic_arr = grads.get(probe)
    if analytic_arr is None:  # probe never entered the graph
        analytic_arr = np.zeros_like(probe.data)
    analytic = analytic_arr.reshape(-1).astype(np.float64)

    base = x.data.astype(np.float64).reshape(-1)
    fd = np.empty_like(base)
    for i in range(base.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            bumped = base.copy()
            bumped[i] += sign * h
            val = f(Tensor(bumped.reshape(x.shape), dtype=np.float64)).item()
            if slot == 0:
                f_plus = val
            else:
                f_minus = val
        fd[i] = (f_plus - f_minus) / (2.0 * h)

    err = np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)
    return float(err.max())
