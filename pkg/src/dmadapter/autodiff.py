"""Dense tensors with define-by-run reverse-mode differentiation.

Arrays live in numpy buffers; every differentiable op records a node with its
inputs and a closure mapping the output gradient to input gradients. The graph
reachable from a loss is replayed in reverse creation order by :func:`backward`.

Broadcasting is deliberately narrow: equal shapes, or a scalar against a tensor.
Row-vector biases go through :func:`add_bias` instead.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64
_SEQ = itertools.count()


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_SEQ)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense array plus an optional gradient slot and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def tape_node(self) -> Optional[Node]:
        return self.node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Parameter:
    """A named tensor; frozen parameters never receive gradients or updates."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def freeze(self) -> None:
        self.trainable = False
        self.tensor.requires_grad = False
        self.tensor.grad = None


@dataclass
class Tape:
    """Operations reachable from one output, in creation (topological) order."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    active: bool = True

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(nodes=[t.node for t in found], outputs=found, active=_GRAD_ENABLED)

    def first_nonfinite(self) -> Optional[Node]:
        """Earliest node whose output is non-finite while all its inputs are finite."""
        for node, out in zip(self.nodes, self.outputs):
            if np.all(np.isfinite(out.data)):
                continue
            if all(np.all(np.isfinite(t.data)) for t in node.inputs):
                return node
        return None


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype.type)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves with ``requires_grad=False`` (frozen parameters) never get a grad
    buffer. Calling twice without zeroing accumulates.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.from_output(loss)
    pending = {id(loss): seed}
    for out in reversed(tape.outputs):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        node = out.node
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# ---------------------------------------------------------------------------
# elementwise


def _binary_grads(a: Tensor, b: Tensor, op: str):
    """Return reducers mapping a full-shape gradient back onto each operand."""
    if a.shape == b.shape:
        return (lambda g: g), (lambda g: g)
    if b.size == 1:
        return (lambda g: g), (lambda g: np.reshape(g.sum(), b.shape))
    if a.size == 1:
        return (lambda g: np.reshape(g.sum(), a.shape)), (lambda g: g)
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ra, rb = _binary_grads(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (ra(g), rb(g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ra, rb = _binary_grads(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (ra(g), rb(-g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ra, rb = _binary_grads(a, b, "mul")
    return _result(
        a.data * b.data, "mul", (a, b), lambda g: (ra(g * b.data), rb(g * a.data))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ra, rb = _binary_grads(a, b, "div")
    out = a.data / b.data
    return _result(
        out, "div", (a, b), lambda g: (ra(g / b.data), rb(-g * out / b.data))
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, "scale", (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype), "relu", (x,),
                   lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
                "log": log, "scale": scale}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch one of add/sub/mul/relu/exp/log/scale by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), "reshape", (x,),
                   lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), "transpose", (x,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                   tensors, bw)


def take(x: Tensor, indices, axis: int = 0, unique: bool = False) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient.

    Pass ``unique=True`` when no index repeats to use a cheaper scatter.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-d index array")
    axis = axis % x.ndim

    def bw(g):
        gx = np.zeros_like(x.data)
        if unique:
            np.moveaxis(gx, axis, 0)[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _result(np.take(x.data, idx, axis=axis), "take", (x,), bw)


def take_along(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row-wise gather from a rank-2 tensor: ``out[r, j] = x[r, idx[r, j]]``."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _result(x.data[rows, idx], "take_along", (x,), bw)


def scatter_cols(values: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Place ``values[r, j]`` at column ``idx[r, j]`` of a zero (R, width) array."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(values.shape[0])[:, None]
    out = np.zeros((values.shape[0], width), dtype=values.data.dtype)
    out[rows, idx] = values.data
    return _result(out, "scatter_cols", (values,), lambda g: (g[rows, idx],))


def take_entries(x: Tensor, rows, cols) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` from a rank-2 tensor into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.broadcast_to(np.asarray(cols, dtype=np.intp), rows.shape)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(x.data[rows, cols], "take_entries", (x,), bw)


def index_add(base: Tensor, rows, src: Tensor, unique: bool = False) -> Tensor:
    """``base`` with ``src[i]`` added onto row ``rows[i]``."""
    rows = np.asarray(rows, dtype=np.intp)
    out = base.data.copy()
    if unique:
        out[rows] += src.data
    else:
        np.add.at(out, rows, src.data)
    return _result(out, "index_add", (base, src), lambda g: (g, g[rows]))


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``r`` of a rank-2 tensor by ``w[r]``."""
    col = w.data[:, None]
    return _result(x.data * col, "mul_rows", (x, w),
                   lambda g: (g * col, (g * x.data).sum(axis=1) if w.requires_grad else None))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.shape != x.shape[-1:]:
        raise ValueError(f"add_bias: bias shape {b.shape} vs input {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, "add_bias", (x, b),
                   lambda g: (g, (g.sum(axis=lead) if lead else g) if b.requires_grad else None))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., k) @ (k, n) with a rank-2 right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]) \
            if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def matmul_ordered(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product summed over ``k`` in a fixed order for every output column.

    BLAS may round differently depending on where a column sits in ``b``;
    this reduction does not, so permuting the columns of ``b`` permutes the
    result bit for bit. Meant for narrow right operands such as router weights.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul_ordered: dimension mismatch {a.shape} @ {b.shape}")
    # explicit loop: numpy's own reductions may regroup terms per column
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a.data, b.data))
    for k in range(a.shape[1]):
        out += a.data[:, k:k + 1] * b.data[k]

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(out, "matmul_ordered", (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dimensions."""
    if a.ndim != b.ndim or a.ndim < 3 or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: dimension mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "bmm", (a, b), bw)


# ---------------------------------------------------------------------------
# normalisations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    # eps=0 on a constant row: xc is exactly 0 there, keep xhat at 0
    inv = np.divide(1.0, np.sqrt(denom), out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if not (gamma.requires_grad or beta.requires_grad):
            return gx, None, None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, "layer_norm", (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, "l2_normalize", (x,), bw)


# ---------------------------------------------------------------------------
# selection


def topk_indices(x, k: int) -> list:
    """Indices of the ``k`` largest entries, descending; ties go to the lower index."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x)
    if arr.ndim != 1:
        raise ValueError(f"topk_indices expects a vector, got shape {arr.shape}")
    if not 1 <= k <= arr.shape[0]:
        raise ValueError(f"k={k} out of range for length {arr.shape[0]}")
    return [int(i) for i in np.argsort(-arr, kind="stable")[:k]]


def topk_rows(x: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`topk_indices` on a rank-2 array, shape (rows, k)."""
    if not 1 <= k <= x.shape[-1]:
        raise ValueError(f"k={k} out of range for width {x.shape[-1]}")
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None
