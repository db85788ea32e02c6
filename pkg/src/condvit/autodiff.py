"""Minimal dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` and, when any input requires a
gradient, records a backward closure on the output.  ``backward`` replays
those closures in exact reverse creation order, which is also the execution
order because every tensor gets a monotonically increasing sequence number.

Broadcasting is deliberately narrow: identical shapes, a scalar with a
tensor, or a tensor whose shape equals the trailing dimensions of the other
(row vector on the last axis, positional table on the last two axes).
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "GraphError",
    "NumericError",
    "Tensor",
    "add",
    "backward",
    "concat",
    "exp",
    "expand",
    "gelu",
    "get_default_dtype",
    "grad_check",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "precision",
    "reshape",
    "scale",
    "set_default_dtype",
    "slice_",
    "softmax",
    "sub",
    "sum_",
    "take_rows",
    "tensor",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, replayed backward)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_SEQ = itertools.count()
_MODE = threading.local()


def grad_enabled() -> bool:
    return getattr(_MODE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Suppress graph recording in the current thread (inference)."""
    previous = grad_enabled()
    _MODE.enabled = False
    try:
        yield
    finally:
        _MODE.enabled = previous


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type (``"float32"``/``"float64"``)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_SEQ)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(a_shape: tuple, b_shape: tuple, op: str) -> None:
    if a_shape == b_shape:
        return
    if a_shape == () or b_shape == ():
        return
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a_shape} and {b_shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        return (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), _bw)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.data.dtype.type(factor)
    return _result(x.data * f, (x,), lambda g: (g * f,))


def power(x, exponent: float) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _result(xd**exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), _bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def slice_(x, index) -> Tensor:
    """Basic (view) indexing: ints, slices and Ellipsis only."""
    x = _as_tensor(x)
    idx = index if isinstance(index, tuple) else (index,)
    for part in idx:
        if not (isinstance(part, (int, slice, np.integer)) or part is Ellipsis):
            raise TypeError(f"slice_ supports ints, slices and Ellipsis, got {type(part).__name__}")
    shape, dtype = x.shape, x.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), _bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: empty input")
    ndim = ts[0].ndim
    axis = axis % ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat: shapes {ref} and {t.shape} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, _bw)


def expand(x, shape) -> Tensor:
    """Repeat ``x`` along new leading axes so its shape becomes ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    src = x.shape
    if shape[len(shape) - len(src):] != src:
        raise DimensionError(f"expand: {src} is not a trailing slice of {shape}")
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_reduce_to(g, src),))


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D ``table`` (embedding lookup)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"take_rows: ids {ids.tolist()} out of range for table of {n} rows")
    shape, dtype = table.shape, table.dtype

    def _bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), _bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS takes a matrix-vector path for a single row, whose rounding differs
    # from the matrix-matrix kernel; padding to two rows keeps every row's
    # result independent of how many rows share the call
    if a.shape[0] == 1:
        return (np.concatenate([a, np.zeros_like(a)]) @ b)[:1]
    return a @ b


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` either has the same batch axes
    or is a plain 2-D matrix shared across the batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # a shared 2-D right operand is one flat GEMM rather than a batch of small ones
    flat = bd.ndim == 2 and ad.ndim > 2
    k, n = bd.shape[-2:]

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, n) @ bd.T).reshape(ad.shape)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    if flat or ad.ndim == 2:
        out = _gemm(ad.reshape(-1, k), bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = ad @ bd
    return _result(out, (a, b), _bw)


# ---------------------------------------------------------------------------
# normalisation and probability kernels
# ---------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), _bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last axis {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), _bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by ``max(||x||_2, eps)`` along ``axis``."""
    x = _as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm > eps
    denom = np.where(clipped, norm, eps).astype(xd.dtype, copy=False)
    out = xd / denom

    def _bw(g):
        # below eps the op is a fixed scaling, above it the projection Jacobian
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clipped, (g - out * proj) / denom, g / denom),)

    return _result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dleaf`` into ``.grad`` of every reachable tensor.

    The graph is released afterwards; calling ``backward`` on the same loss
    again raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor that does not require grad")
    if loss._backward is None and loss._parents:
        raise GraphError("graph already consumed; rebuild the forward pass")

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in _reachable(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            if node._parents:
                raise GraphError("graph already consumed; rebuild the forward pass")
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
        node._backward = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    scalar_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-4,
    reference: str = "float64",
    entries: int | None = None,
    seed: int = 0,
    order: int = 2,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.  ``scalar_fn``
    must rebuild its graph from ``params`` on every call.  ``entries`` caps
    the number of positions differenced per parameter (a seeded sample);
    the analytic gradient is always computed in full.

    The analytic gradient is taken at the parameters' own precision.  With
    ``reference="float64"`` (default) the finite differences are evaluated
    with the parameters promoted to float64, so a float32 build is compared
    against a reference whose rounding noise does not swamp the difference
    quotient.  ``reference="native"`` differences at the parameters' dtype.

    ``order=4`` uses the five-point central stencil, whose O(h^4) truncation
    error stays below 64-bit tolerances on high-curvature entries.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    if reference not in ("float64", "native"):
        raise ValueError(f"unknown reference {reference!r}")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = scalar_fn()
    if loss.requires_grad:
        backward(loss)
    analytic = [
        (p.grad.astype(np.float64) if p.grad is not None else np.zeros(p.shape)) for p in params
    ]
    originals = [p.data for p in params]
    ref_dtype = np.dtype(np.float64) if reference == "float64" else None
    worst = 0.0
    try:
        with precision(ref_dtype or _DEFAULT_DTYPE):
            if ref_dtype is not None:
                for p in params:
                    p.data = p.data.astype(ref_dtype)
            pick = np.random.Generator(np.random.Philox(seed))
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                a_flat = a.reshape(-1)
                positions = range(flat.size)
                if entries is not None and flat.size > entries:
                    positions = np.sort(pick.choice(flat.size, size=entries, replace=False))
                for i in positions:
                    orig = flat[i]

                    def at(step):
                        flat[i] = orig + step
                        x = float(flat[i])
                        return x, float(scalar_fn().data)

                    x_plus, f_plus = at(h)
                    x_minus, f_minus = at(-h)
                    if order == 2:
                        # divide by the perturbation actually stored (rounded in float32)
                        numeric = (f_plus - f_minus) / (x_plus - x_minus)
                    else:
                        x_plus2, f_plus2 = at(2 * h)
                        x_minus2, f_minus2 = at(-2 * h)
                        numeric = (8 * (f_plus - f_minus) - (f_plus2 - f_minus2)) / (
                            8 * (x_plus - x_minus) - (x_plus2 - x_minus2)
                        )
                    flat[i] = orig
                    ana = float(a_flat[i])
                    err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
                    worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.zero_grad()
    return worst
