"""Minimal reverse-mode automatic differentiation on top of numpy.

Each op returns a new :class:`Tensor`.  When any input requires a gradient
(and recording is enabled) the output keeps references to its inputs and a
closure mapping the output gradient to input gradients.  :func:`backward`
orders that graph topologically and walks it in reverse.

Graph policy: the graph lives as long as the output tensor does.  Nothing is
cleared by :func:`backward`; calling it twice through the same graph
accumulates leaf gradients twice.  Use :func:`no_grad` for inference so no
graph is recorded at all.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "softmax",
    "log",
    "exp",
    "power",
    "max_pool_over_time",
    "decimate_by_2_over_time",
    "layer_norm",
    "concat",
    "narrow",
    "transpose",
    "sum",
    "mean",
    "check_gradients",
    "check_param_gradients",
    "relative_error",
    "record_branches",
    "replay_branches",
]


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch pattern (relu signs, max-pool argmax) of every piecewise op run inside."""
    prev = getattr(_state, "branches", None)
    _state.branches = trace = []
    try:
        yield trace
    finally:
        _state.branches = prev


@contextlib.contextmanager
def replay_branches(trace: list):
    """Make piecewise ops reuse ``trace`` (from ``record_branches``) instead of their own branch choice.

    Inside, the graph evaluates the smooth piece that was active when the
    trace was taken, which is the piece its analytic gradient describes.
    """
    prev = getattr(_state, "replay", None)
    _state.replay = iter(trace)
    try:
        yield
    finally:
        _state.replay = prev


def _note_branch(pattern: np.ndarray) -> np.ndarray:
    replay = getattr(_state, "replay", None)
    if replay is not None:
        recorded = next(replay, None)
        if recorded is None or recorded.shape != pattern.shape:
            raise ShapeError("replay_branches: graph does not match the recorded branch trace")
        pattern = recorded
    trace = getattr(_state, "branches", None)
    if trace is not None:
        trace.append(pattern)
    return pattern


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    # make numpy arrays on the left defer to the reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

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

    def __pow__(self, exponent):
        return power(self, exponent)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# graph traversal


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each reached leaf tensor to its (accumulated) gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def _patches(xp: np.ndarray, k: int, t: int) -> np.ndarray:
    # (C, T + K - 1) -> (C*K, T) with row c*K + j holding xp[c, j:j+T]
    win = np.lib.stride_tricks.sliding_window_view(xp, t, axis=1)
    return np.ascontiguousarray(win).reshape(-1, t)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 1-D convolution with 'same' zero padding.

    ``x`` is (batch, in_channels, time), ``weight`` is (out, in, kernel).  The
    sequence is padded by floor((k-1)/2) on the left and ceil((k-1)/2) on the
    right so the output keeps the input length.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv1d: bias shape {bias.shape} does not match weight {weight.shape}")
    n, c, t = x.shape
    o, _, k = weight.shape
    left = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, k - 1 - left)))
    w2 = weight.data.reshape(o, c * k)
    out = np.empty((n, o, t), dtype=np.result_type(x.data, weight.data))
    for i in range(n):
        np.matmul(w2, _patches(xp[i], k, t), out=out[i])
    if bias is not None:
        out += bias.data[:, None]

    def grad_fn(g):
        gw = np.zeros_like(w2) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(n):
            if gw is not None:
                gw += g[i] @ _patches(xp[i], k, t).T
            if gxp is not None:
                gcols = (w2.T @ g[i]).reshape(c, k, t)
                for j in range(k):
                    gxp[i, :, j : j + t] += gcols[:, j, :]
        gx = gxp[:, :, left : left + t] if gxp is not None else None
        gwr = gw.reshape(o, c, k) if gw is not None else None
        if bias is None:
            return gx, gwr
        return gx, gwr, g.sum(axis=(0, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv1d")


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    # keep outputs strictly inside (0, 1) where the exact value rounds to an endpoint
    info = np.finfo(y.dtype)
    y = np.clip(y, info.tiny, 1.0 - info.epsneg)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = _note_branch(x.data > 0)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = _note_branch(x.data > 0)
    scale = np.where(mask, 1.0, slope).astype(x.dtype, copy=False)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    y = x.data**p
    return _make(y, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis`` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), grad_fn, "layer_norm")


# ---------------------------------------------------------------------------
# pooling, reshaping, reductions


def max_pool_over_time(x: Tensor, axis: int = -1) -> Tensor:
    """Global max over ``axis``; the axis is removed.  Ties route gradient to the first maximum."""
    axis = axis % x.ndim
    idx = _note_branch(np.expand_dims(np.argmax(x.data, axis=axis), axis))
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(y, (x,), grad_fn, "max_pool_over_time")


def decimate_by_2_over_time(x: Tensor, axis: int = -1) -> Tensor:
    """Keep the even-indexed frames along ``axis``: length n becomes ceil(n/2)."""
    axis = axis % x.ndim
    sl = (slice(None),) * axis + (slice(None, None, 2),)
    y = x.data[sl]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(y, (x,), grad_fn, "decimate_by_2_over_time")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis`` (axis kept)."""
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: range [{start}, {start + length}) out of bounds for axis {axis} of shape {x.shape}")
    sl = (slice(None),) * axis + (slice(start, start + length),)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(x.data[sl], (x,), grad_fn, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(y), (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    y = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(y).size, 1)

    def grad_fn(g):
        return (_expand_reduced(g / n, x.shape, axis, keepdims),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def check_gradients(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f`` must map a float64 tensor to a scalar tensor.  ``coords`` restricts the
    check to a subset of flat indices of ``point``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    out = f(t)
    if out.size != 1:
        raise ValueError(f"check_gradients: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(x0.size)
    idx = range(x0.size) if coords is None else list(coords)
    flat = x0.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in idx:
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric = (fp - fm) / (2.0 * eps)
            if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
                raise FloatingPointError(f"check_gradients: non-finite value at coordinate {i}")
            worst = max(worst, float(relative_error(analytic[i], numeric)))
    return worst


def check_param_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    kink_retries: int = 0,
    freeze_branches: bool = False,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    Parameters are perturbed in place and restored.  ``per_tensor`` limits the
    number of randomly chosen coordinates checked in each tensor.  Returns the
    max relative error per parameter name.

    With ``kink_retries > 0`` the branch pattern of piecewise ops is compared
    at x, x + h and x - h.  If the stencil straddles a kink (the function is
    not differentiable inside it) h is divided by 10 and the coordinate is
    re-evaluated, at most ``kink_retries`` times.

    With ``freeze_branches`` the perturbed evaluations replay the branch
    pattern taken at x, so the difference is taken on the smooth piece the
    analytic gradient belongs to.  Wide networks have so many units near a
    kink that no step both avoids them all and stays clear of roundoff.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("check_param_gradients: parameters must be float64")
        p.grad = None
        p.requires_grad = True
    with record_branches() as base:
        loss = loss_fn()
    backward(loss)

    def evaluate() -> tuple[float, list]:
        with contextlib.ExitStack() as stack:
            if freeze_branches:
                stack.enter_context(replay_branches(base))
            trace = stack.enter_context(record_branches())
            value = loss_fn().item()
        return value, trace

    report = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            if per_tensor is None or per_tensor >= flat.size:
                idx = range(flat.size)
            else:
                idx = rng.choice(flat.size, size=per_tensor, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                h = eps
                for attempt in range(kink_retries + 1):
                    flat[i] = orig + h
                    fp, tp = evaluate()
                    flat[i] = orig - h
                    fm, tm = evaluate()
                    flat[i] = orig
                    if not kink_retries or (_same_branches(tp, base) and _same_branches(tm, base)):
                        break
                    h /= 10.0
                numeric = (fp - fm) / (2.0 * h)
                if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
                    raise FloatingPointError(f"check_param_gradients: non-finite value in {name}[{i}]")
                worst = max(worst, float(relative_error(analytic[i], numeric)))
            report[name] = worst
            p.grad = None
    return report
