"""Dense tensors with tape-based reverse-mode differentiation.

Every public op builds its result from numpy arrays and, when a tape is
active and some input requires a gradient, records a node holding the
inputs and a closure mapping the output gradient to input gradients.
``backward`` walks the tape in reverse recording order, which is a valid
reverse topological order because a node can only be recorded after all of
its inputs exist.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


class NumericDomainError(ValueError):
    """Raised in checked mode for log of non-positive values or division by zero."""


class ContractError(RuntimeError):
    """Raised when a caller violates an op's preconditions."""


class _Settings(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.checked = False
        self.tape: Optional["Tape"] = None


_settings = _Settings()


def default_dtype() -> type:
    return _settings.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype!r}")
    _settings.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the element type used for newly created tensors."""
    old = _settings.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _settings.dtype = old


def set_checked(flag: bool) -> None:
    _settings.checked = bool(flag)


def is_checked() -> bool:
    return _settings.checked


@contextlib.contextmanager
def checked(flag: bool = True) -> Iterator[None]:
    old = _settings.checked
    _settings.checked = bool(flag)
    try:
        yield
    finally:
        _settings.checked = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _settings.dtype)
        if arr.ndim and 0 in arr.shape:
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

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


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, tape: "Tape"):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded, ops outside
    are plain forward evaluations. ``clear`` drops all recorded nodes.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = _settings.tape
        _settings.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _settings.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.tape = None
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _settings.tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _settings.tape
    _settings.tape = None
    try:
        yield
    finally:
        _settings.tape = old


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x, dtype=x.dtype)
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _settings.checked:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.name = None
    tape = _settings.tape
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(out, inputs, backward_fn, tape)
        out._node = node
        tape.record(node)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate additively across calls; call ``zero_grad`` on
    parameters (or reset ``.grad``) between steps.
    """
    if loss.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad under an active tape")
    if loss._node is None:
        # the loss is itself a leaf
        seed = np.ones_like(loss.data) if grad is None else grad
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    tape = loss._node.tape
    # recording order is a topological order; a cleared tape falls back to a graph walk
    nodes = tape.nodes if tape.nodes else _collect(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if grad is None else grad}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            if t._node is None:
                tg = np.asarray(tg, dtype=t.data.dtype)
                t.grad = tg.copy() if t.grad is None else t.grad + tg
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = tg if prev is None else prev + tg


def _collect(loss: Tensor) -> list[_Node]:
    order: list[_Node] = []
    seen: set[int] = set()
    stack = [(loss._node, False)]
    while stack:
        node, done = stack.pop()
        if node is None:
            continue
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_inputs(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_inputs(a, b)
    if _settings.checked and np.any(b.data == 0):
        raise NumericDomainError("division by zero")

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if _settings.checked and np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if _settings.checked and np.any(a.data < 0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum(a, value: float) -> Tensor:
    """max(a, value) with the subgradient routed to ``a`` where a >= value."""
    a = as_tensor(a)
    keep = a.data >= value
    return _make(np.where(keep, a.data, a.data.dtype.type(value)), (a,), lambda g: (g * keep,), "maximum")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    th = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        gx = np.empty_like(x)
        kernels.gelu_backward(np.ascontiguousarray(g, dtype=x.dtype).reshape(-1),
                              np.ascontiguousarray(x).reshape(-1), th.reshape(-1), gx.reshape(-1))
        return (gx,)

    return _make(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(out, (a,), bw, "silu")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, log, gelu, silu."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div,
        "exp": exp, "log": log, "gelu": gelu, "silu": silu,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, index, g) if _is_advanced(index) else _assign_add(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def _is_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def _assign_add(full, index, g):
    full[index] += g


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(out, ts, bw, "concat")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, bw, "linear")


# ---------------------------------------------------------------------------
# fused network primitives
# ---------------------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gamma, beta."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    xhat = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=x2.dtype)
    kernels.layer_norm_forward(x2, float(eps), xhat, inv)
    out = xhat
    inputs = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (d,):
            raise ValueError(f"gamma shape {gamma.shape} != ({d},)")
        out = out * gamma.data
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (d,):
            raise ValueError(f"beta shape {beta.shape} != ({d},)")
        out = out + beta.data
        inputs.append(beta)

    def bw(g):
        g2 = g.reshape(-1, d)
        gxhat = g2 * gamma.data if gamma is not None else g2
        gx = np.empty_like(xhat)
        kernels.layer_norm_backward(np.ascontiguousarray(gxhat, dtype=xhat.dtype), xhat, inv, gx)
        grads = [gx.reshape(x.shape)]
        if gamma is not None:
            grads.append((g2 * xhat).sum(axis=0))
        if beta is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False).reshape(x.shape), inputs, bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def softmax_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v over the last two axes, materialised."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape and k.shape[:-2] == v.shape[:-2] and k.shape[-2] == v.shape[-2]):
        raise ValueError(f"attention extents mismatch: q{q.shape} k{k.shape} v{v.shape}")
    dh = q.shape[-1]
    scale = q.dtype.type(1.0 / np.sqrt(dh))
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def bw(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "softmax_attention")


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, negative source coordinates clamped to 0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m.astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of a channels-last grid [..., H, W, C]."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ah = _resize_matrix(h, out_h, x.dtype)
    aw = _resize_matrix(w, out_w, x.dtype)
    out = np.einsum("ih,...hwc,jw->...ijc", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ih,...ijc,jw->...hwc", ah, g, aw, optimize=True),)

    return _make(out, (x,), bw, "bilinear_resize")
