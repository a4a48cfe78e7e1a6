"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records a
:class:`Node` holding its parents and a closure that maps the output gradient to
input gradients. :func:`backward` orders those nodes topologically and visits
each exactly once.

Precision is selected per run with :func:`set_precision` (32-bit for training,
64-bit for gradient checking); every tensor created afterwards uses that width.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dqlr.errors import DimensionError, GraphError, NumericError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "sqrt",
    "clip_min",
    "matmul",
    "linear",
    "reduce",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "stack",
    "concat",
    "gather_rows",
    "straight_through",
    "detach",
    "elementwise",
    "conv2d",
    "conv_transpose2d",
    "build_graph",
    "backward",
    "check_gradients",
]

_DTYPE: type = np.float32
_GRAD_ENABLED = True


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for all tensors created from now on."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = 64 if _DTYPE is np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Op records in topological order (inputs before outputs)."""

    order: list["Tensor"] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.order)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...], bw) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._node = None
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._node = Node(op, parents, bw)
        return out

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fit(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting exists, so reduce fully when the target is 0-d
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    return Tensor._result(
        a.data + b.data, "add", (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    return Tensor._result(
        a.data - b.data, "sub", (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return _fit(g / b.data, a.shape), _fit(-g * a.data / (b.data * b.data), b.shape)

    return Tensor._result(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            grad = g * 0.5 / out
        if not np.all(np.isfinite(grad)):
            raise NumericError("sqrt backward at zero")
        return (grad,)

    return Tensor._result(out, "sqrt", (a,), bw)


def clip_min(a: Tensor, low: float) -> Tensor:
    mask = a.data > low
    out = np.where(mask, a.data, np.asarray(low, dtype=a.data.dtype))
    return Tensor._result(out, "clip_min", (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "sqrt": sqrt,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (binary ops take ``b``)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if b is None else fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Tensor._result(
        a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias row added to every row of the product."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return Tensor._result(out, "linear", (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g))
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = out + bias.data
    return Tensor._result(
        out,
        "linear",
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reduce(op: str, a: Tensor, axes=None) -> Tensor:
    if op == "sum":
        return sum(a, axes)
    if op == "mean":
        return mean(a, axes)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, "transpose", (a,), lambda g: (g.transpose(inverse),))


def _getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(out, "getitem", (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack: empty sequence")
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise DimensionError(f"stack: shape {t.shape} != {first}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._result(out, "stack", tuple(tensors), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(out, "concat", tuple(tensors), bw)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows ``table[indices]``; gradients scatter-add back into the table."""
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return Tensor._result(out, "gather_rows", (table,), bw)


def straight_through(x: Tensor, values) -> Tensor:
    """Forward ``values``; backward passes the gradient to ``x`` unchanged."""
    values = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=x.data.dtype)
    if values.shape != x.shape:
        raise DimensionError(f"straight_through: {values.shape} != {x.shape}")
    return Tensor._result(values.copy(), "straight_through", (x,), lambda g: (g,))


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out._node = None
    out.requires_grad = False
    return out


# --------------------------------------------------------------------------
# convolution

def _pair_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, Ho, Wo, kh, kw] view into the padded input
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter_windows(cols: np.ndarray, out_shape, stride: int) -> np.ndarray:
    # adjoint of _windows: cols [N, Ho, Wo, C, kh, kw] -> summed into [N, C, Hp, Wp]
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def _conv_batch(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"convolution input must be [C,H,W] or [N,C,H,W], got {x.shape}")


def _check_conv_inputs(op: str, x: Tensor, kernel: Tensor, stride: int, padding: int) -> None:
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op}: stride must be >= 1 and padding >= 0")
    if kernel.ndim != 4:
        raise DimensionError(f"{op}: kernel must be 4-d, got {kernel.shape}")
    if not np.all(np.isfinite(x.data)) or not np.all(np.isfinite(kernel.data)):
        raise NumericError(f"{op}: non-finite input")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C_in,H,W] or [N,C_in,H,W] with ``kernel`` [C_out,C_in,kH,kW]."""
    _check_conv_inputs("conv2d", x, kernel, stride, padding)
    xb, squeeze = _conv_batch(x)
    n, c, h, w = xb.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    ho, wo = _pair_out(h, kh, stride, padding), _pair_out(w, kw, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xb.data, pad) if padding else xb.data
    win = _windows(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        dk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # [N,Ho,Wo,C,kh,kw]
        dxp = _scatter_windows(cols, xp.shape, stride)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [np.ascontiguousarray(dx), dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    result = Tensor._result(out, "conv2d", parents, bw)
    return reshape(result, result.shape[1:]) if squeeze else result


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input; ``kernel`` is [C_in,C_out,kH,kW].

    Output extent is ``(H-1)*stride - 2*padding + kH``.
    """
    _check_conv_inputs("conv_transpose2d", x, kernel, stride, padding)
    xb, squeeze = _conv_batch(x)
    n, c, h, w = xb.shape
    ci, co, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d: padding removes the whole output")
    cols = np.tensordot(xb.data, kernel.data, axes=([1], [0]))  # [N,H,W,Co,kh,kw]
    full = _scatter_windows(cols, (n, co, hp, wp), stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, kh, kw, stride, h, w)  # [N,Co,H,W,kh,kw]
        dx = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dk = np.tensordot(xb.data, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = [np.ascontiguousarray(dx), dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (xb, kernel) if bias is None else (xb, kernel, bias)
    result = Tensor._result(out, "conv_transpose2d", parents, bw)
    return reshape(result, result.shape[1:]) if squeeze else result


# --------------------------------------------------------------------------
# backward

def build_graph(loss: Tensor) -> Graph:
    """Topologically order every tensor reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.parents):
                if id(p) not in seen and p.requires_grad:
                    stack_.append((p, False))
    return Graph(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every parameter")
    graph = graph or build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._node.parents, t._node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def check_gradients(f: Callable[[Tensor], Tensor], point, eps: float = 1e-3) -> float:
    """Worst relative error between backward and central differences of ``f`` at ``point``.

    Runs in 64-bit mode. The error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    with precision(64):
        base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(base, requires_grad=True)
        out = f(x)
        if out.requires_grad:
            backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(Tensor(base)).item()
                flat[i] = orig - eps
                lo = f(Tensor(base)).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
