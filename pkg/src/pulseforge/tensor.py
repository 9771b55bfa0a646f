"""Dense tensors with reverse-mode automatic differentiation.

A :class:`DiffTensor` wraps a contiguous row-major numpy buffer and, when it
is produced by an operation, a record of its parents plus a backward rule.
Calling ``backward()`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every tensor that requires
them.

Design constraints baked in here:

* float32 and float64 only (training runs in float32, gradient checks in
  float64);
* backward may run once per graph, after which the graph is considered
  consumed; gradients are cleared explicitly via :meth:`DiffTensor.zero_grad`;
* any NaN produced by a forward operation raises :class:`NumericError`
  naming the offending op (silent NaN destroys training runs);
* no higher-order derivatives, no GPU, no in-graph shape polymorphism.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffTensor",
    "GraphError",
    "NumericError",
    "ShapeError",
    "tensor",
    "elementwise",
    "activation",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "softmax",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clamp_min",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "l1_norm",
    "matmul",
    "reshape",
    "transpose",
    "take_row",
    "set_default_dtype",
    "get_default_dtype",
    "set_nan_guard",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Operand shapes (or axes) are incompatible with the requested op."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (non-scalar backward, double backward)."""


class NumericError(FloatingPointError):
    """A forward operation produced NaN; the message names the op."""


_SUPPORTED_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32
_nan_guard = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for leaves created from plain Python data."""
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _SUPPORTED_DTYPES:
        raise TypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dt


def get_default_dtype():
    return _default_dtype


def set_nan_guard(enabled: bool) -> None:
    """Toggle the forward NaN check (on by default)."""
    global _nan_guard
    _nan_guard = bool(enabled)


def _check_nan(data: np.ndarray, op: str) -> None:
    # np.min propagates NaN in a single fast pass; size is always >= 1.
    if _nan_guard and data.size and np.isnan(np.min(data)):
        raise NumericError(f"NaN produced by op '{op}'")


class DiffTensor:
    """Dense N-dimensional float tensor participating in a gradient graph.

    Invariants: ``data`` is contiguous row-major; ``grad``, when populated,
    has the same shape and dtype as ``data``; a tensor with
    ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, DiffTensor):
            raise TypeError("wrap raw array data, not another DiffTensor")
        if dtype is not None:
            dt = np.dtype(dtype).type
        elif isinstance(data, np.ndarray) and data.dtype.type in _SUPPORTED_DTYPES:
            dt = data.dtype.type
        else:
            dt = _default_dtype
        if dt not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dt))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward = None
        self._op: str | None = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

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
        """The raw value buffer (shared, do not mutate mid-graph)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DiffTensor":
        """A grad-less leaf sharing this tensor's buffer."""
        out = DiffTensor.__new__(DiffTensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = None
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self._op or ("leaf" if not self._parents else "node")
        return f"DiffTensor(shape={self.shape}, dtype={self.data.dtype.name}, op={tag})"

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        The receiver must be scalar (size one).  A graph may be traversed
        once; a second call raises :class:`GraphError`.  Gradients
        accumulate (+=) into pre-existing ``grad`` buffers, so leaves shared
        between independently built graphs sum contributions.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; build a new graph")
        if not self.requires_grad:
            self._consumed = True
            return

        topo: list[DiffTensor] = []
        visited: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        self._consumed = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> DiffTensor:
    """Create a leaf tensor."""
    return DiffTensor(data, requires_grad=requires_grad, dtype=dtype)


def _accumulate(t: DiffTensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = delta.copy()
    else:
        t.grad += delta


def _node(data: np.ndarray, parents: Sequence[DiffTensor], backward, op: str) -> DiffTensor:
    _check_nan(data, op)
    out = DiffTensor.__new__(DiffTensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.grad = None
    out._consumed = False
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def make_op(data: np.ndarray, parents: Sequence[DiffTensor], backward, op: str) -> DiffTensor:
    """Public hook for modules that register custom differentiable ops.

    ``backward`` receives the output gradient and must push contributions
    into each parent via :func:`accumulate_grad`.
    """
    return _node(data, parents, backward, op)


accumulate_grad = _accumulate


def _coerce(x, like: DiffTensor) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=like.data.dtype))


def _binary_data(a: DiffTensor, b: DiffTensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b) -> DiffTensor:
    a = a if isinstance(a, DiffTensor) else _coerce(a, b)
    b = _coerce(b, a)
    _binary_data(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw, "add")


def sub(a, b) -> DiffTensor:
    a = a if isinstance(a, DiffTensor) else _coerce(a, b)
    b = _coerce(b, a)
    _binary_data(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bw, "sub")


def mul(a, b) -> DiffTensor:
    a = a if isinstance(a, DiffTensor) else _coerce(a, b)
    b = _coerce(b, a)
    _binary_data(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bw, "mul")


def div(a, b) -> DiffTensor:
    a = a if isinstance(a, DiffTensor) else _coerce(a, b)
    b = _coerce(b, a)
    _binary_data(a, b, "div")
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), bw, "div")


def neg(a: DiffTensor) -> DiffTensor:
    def bw(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), bw, "neg")


def scale(a: DiffTensor, s: float) -> DiffTensor:
    """Multiply by a Python scalar (kept distinct so graphs stay lean)."""
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), bw, "scale")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}


def elementwise(op_kind: str, a, b) -> DiffTensor:
    """Dispatch form of the binary ops: add, sub, mul, div, scale."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {op_kind!r}") from None
    return fn(a, b)


# -- activations -------------------------------------------------------------


def relu(x: DiffTensor) -> DiffTensor:
    out_data = np.maximum(x.data, 0)

    def bw(g):
        _accumulate(x, g * (x.data > 0))

    return _node(out_data, (x,), bw, "relu")


def sigmoid(x: DiffTensor) -> DiffTensor:
    # Stable piecewise form; output lies strictly inside (0, 1).
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)

    def bw(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), bw, "sigmoid")


def softmax(x: DiffTensor, axis: int) -> DiffTensor:
    axis = _check_axis(x, axis, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _node(out_data, (x,), bw, "softmax")


def activation(kind: str, x: DiffTensor, axis: int | None = None) -> DiffTensor:
    """Dispatch form: relu, sigmoid, or softmax (softmax needs ``axis``)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax requires an axis")
        return softmax(x, axis)
    raise ValueError(f"unknown activation kind {kind!r}")


def exp(x: DiffTensor) -> DiffTensor:
    out_data = np.exp(x.data)

    def bw(g):
        _accumulate(x, g * out_data)

    return _node(out_data, (x,), bw, "exp")


def log(x: DiffTensor) -> DiffTensor:
    out_data = np.log(x.data)

    def bw(g):
        _accumulate(x, g / x.data)

    return _node(out_data, (x,), bw, "log")


def sqrt(x: DiffTensor) -> DiffTensor:
    out_data = np.sqrt(x.data)

    def bw(g):
        _accumulate(x, g / (2.0 * out_data))

    return _node(out_data, (x,), bw, "sqrt")


def absolute(x: DiffTensor) -> DiffTensor:
    out_data = np.abs(x.data)

    def bw(g):
        _accumulate(x, g * np.sign(x.data))

    return _node(out_data, (x,), bw, "abs")


def clamp_min(x: DiffTensor, lo: float) -> DiffTensor:
    """max(x, lo); gradient passes only where x > lo."""
    lo = float(lo)
    out_data = np.maximum(x.data, lo)

    def bw(g):
        _accumulate(x, g * (x.data > lo))

    return _node(out_data, (x,), bw, "clamp_min")


# -- reductions --------------------------------------------------------------


def _check_axis(x: DiffTensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _norm_axes(x: DiffTensor, axes, op: str) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_check_axis(x, a, op) for a in axes)
    if len(axes) == 0:
        raise ShapeError(f"{op}: empty reduction")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"{op}: repeated axes {axes}")
    return axes


def _keepdims_shape(shape: tuple[int, ...], axes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(x: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    axes = _norm_axes(x, axes, "sum")
    out_data = x.data.sum(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(x.shape, axes)

    def bw(g):
        _accumulate(x, np.broadcast_to(g.reshape(kshape), x.shape))

    return _node(np.ascontiguousarray(out_data), (x,), bw, "sum")


def reduce_mean(x: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    axes = _norm_axes(x, axes, "mean")
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(x.shape, axes)
    inv = 1.0 / count

    def bw(g):
        _accumulate(x, np.broadcast_to(g.reshape(kshape) * inv, x.shape))

    return _node(np.ascontiguousarray(out_data), (x,), bw, "mean")


def reduce_max(x: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    """Max over ``axes``; gradient routes to the first attaining index."""
    axes = _norm_axes(x, axes, "max")
    out_data = x.data.max(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(x.shape, axes)

    kept = tuple(i for i in range(x.ndim) if i not in axes)
    perm = kept + axes
    inv_perm = np.argsort(perm)
    kept_shape = tuple(x.shape[i] for i in kept)
    red = 1
    for a in axes:
        red *= x.shape[a]

    def bw(g):
        xt = x.data.transpose(perm).reshape(kept_shape + (red,))
        am = np.argmax(xt, axis=-1)  # first index on ties
        gz = np.zeros_like(xt)
        np.put_along_axis(gz, am[..., None], g.reshape(kept_shape + (1,)), axis=-1)
        gx = gz.reshape(tuple(x.shape[i] for i in perm)).transpose(inv_perm)
        _accumulate(x, np.ascontiguousarray(gx))

    return _node(np.ascontiguousarray(out_data), (x,), bw, "max")


def l1_norm(x: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    """Sum of absolute values over ``axes``."""
    axes = _norm_axes(x, axes, "l1_norm")
    out_data = np.abs(x.data).sum(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(x.shape, axes)

    def bw(g):
        _accumulate(x, np.broadcast_to(g.reshape(kshape), x.shape) * np.sign(x.data))

    return _node(np.ascontiguousarray(out_data), (x,), bw, "l1_norm")


_REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max, "l1_norm": l1_norm}


def reduce(kind: str, x: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    """Dispatch form of the reductions: sum, mean, max, l1_norm."""
    try:
        fn = _REDUCTIONS[kind]
    except KeyError:
        raise ValueError(f"unknown reduction kind {kind!r}") from None
    return fn(x, axes=axes, keepdims=keepdims)


# -- linear algebra / shape ops ----------------------------------------------


def matmul(a: DiffTensor, b) -> DiffTensor:
    b = _coerce(b, a)
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"matmul: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), bw, "matmul")


def reshape(x: DiffTensor, shape: Iterable[int]) -> DiffTensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(np.ascontiguousarray(out_data), (x,), bw, "reshape")


def transpose(x: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def bw(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(inv)))

    return _node(out_data, (x,), bw, "transpose")


def take_row(x: DiffTensor, i: int) -> DiffTensor:
    """Select ``x[i]`` along the leading axis (e.g. one sample of a batch)."""
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"take_row: index {i} out of range for shape {x.shape}")
    out_data = np.ascontiguousarray(x.data[i])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        _accumulate(x, gx)

    return _node(out_data, (x,), bw, "take_row")


# -- serialization (PFT1) ------------------------------------------------------

_MAGIC = b"PFT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    """Write one tensor: magic "PFT1", u32 rank, u32 dims, u8 dtype tag, payload.

    Little-endian throughout; dtype tag 0 is float32, 1 is float64.
    """
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise TypeError(f"cannot serialize dtype {arr.dtype}; use float32 or float64")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", fh.read(1))
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("="), copy=False)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
