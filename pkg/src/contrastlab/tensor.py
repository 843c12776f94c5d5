"""Dense double-precision tensors with reverse-mode automatic differentiation.

Design constraints, chosen for auditability at desk scale:

* storage is always float64, row-major (C order);
* binary ops conform when shapes are equal or one operand's shape is a
  trailing suffix of the other's (broadcast over leading batch extents
  only — no singleton-axis broadcasting);
* the graph is rebuilt on every forward pass; backward walks it once in
  reverse topological order, so shared subexpressions accumulate each
  path exactly once;
* gradient rules are pure functions from the output gradient to the
  parent gradients, which keeps them re-entrant and lets repeated
  ``backward`` calls accumulate.
"""
from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DomainError, EvaluationError

GradFn = Callable[[np.ndarray], tuple]


class Tensor:
    """Value array plus gradient slot and computation-graph linkage."""

    __slots__ = ("data", "grad", "_parents", "_grad_fn")

    def __init__(self, data, _parents: tuple = (), _grad_fn: GradFn | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # -- operator sugar -------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis: int | None = None):
        return sum_(self, axis)

    def mean(self, axis: int | None = None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _joint_shape(sa: tuple, sb: tuple) -> tuple:
    """Output shape for a binary op under leading-batch broadcasting."""
    if sa == sb:
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ContractViolation(
        f"operand shapes {sa} and {sb} do not conform "
        "(equal shapes or leading-batch broadcast only)"
    )


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading extents it was broadcast across."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# -- elementwise and linear primitives ----------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _joint_shape(a.shape, b.shape)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _joint_shape(a.shape, b.shape)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _joint_shape(a.shape, b.shape)

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _joint_shape(a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")

    def grad_fn(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(a.data / b.data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive argument")
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if (p < 0.0 or not p.is_integer()) and np.any(a.data <= 0.0):
        raise DomainError(f"x ** {p} needs a strictly positive base")

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),) if p != 0.0 else (np.zeros_like(a.data),)

    return Tensor(a.data ** p, (a,), grad_fn)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def matmul(a, b) -> Tensor:
    """Matrix product for 2D @ 2D, 1D @ 2D, and 2D @ 1D operands."""
    a, b = as_tensor(a), as_tensor(b)
    ka, kb = a.data.ndim, b.data.ndim
    if ka not in (1, 2) or kb not in (1, 2) or (ka, kb) == (1, 1):
        raise ContractViolation(f"matmul supports 2Dx2D, 1Dx2D, 2Dx1D; got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if (ka, kb) == (2, 2):
            return g @ b.data.T, a.data.T @ g
        if (ka, kb) == (1, 2):
            return b.data @ g, np.outer(a.data, g)
        return np.outer(g, b.data), a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ContractViolation(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")

    def grad_fn(g):
        return g * b.data, g * a.data

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation(f"transpose needs a 2D tensor, got {a.shape}")
    return Tensor(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    new = tuple(shape)
    if math.prod(new) != a.data.size:
        raise ContractViolation(f"cannot reshape {a.shape} to {new}")
    return Tensor(a.data.reshape(new), (a,), lambda g: (g.reshape(a.shape),))


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        return Tensor(a.data.sum(), (a,), lambda g: (np.full(a.shape, float(g)),))
    ax = axis % a.data.ndim

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return Tensor(a.data.sum(axis=ax), (a,), grad_fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
        return Tensor(a.data.mean(), (a,), lambda g: (np.full(a.shape, float(g) / n),))
    ax = axis % a.data.ndim
    n = a.shape[ax]

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy(),)

    return Tensor(a.data.mean(axis=ax), (a,), grad_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractViolation("concat of an empty sequence")
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=ax))

    return Tensor(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), grad_fn)


def gather(a, indices) -> Tensor:
    """Select entries along the last axis; gradients scatter-add back.

    For a 1D source, ``indices`` is a 1D integer array; for a 2D source,
    ``indices`` has one row of column indices per source row.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim == 1:
        if idx.ndim != 1:
            raise ContractViolation(f"gather on 1D source needs 1D indices, got {idx.shape}")
        if np.any(idx < 0) or np.any(idx >= a.shape[0]):
            raise ContractViolation("gather index out of range")

        def grad_fn(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(a.data[idx], (a,), grad_fn)
    if a.data.ndim == 2:
        if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
            raise ContractViolation(f"gather on {a.shape} needs ({a.shape[0]}, k) indices, got {idx.shape}")
        if np.any(idx < 0) or np.any(idx >= a.shape[1]):
            raise ContractViolation("gather index out of range")
        rows = np.arange(a.shape[0])[:, None]

        def grad_fn(g):
            out = np.zeros_like(a.data)
            np.add.at(out, (rows, idx), g)
            return (out,)

        return Tensor(a.data[rows, idx], (a,), grad_fn)
    raise ContractViolation(f"gather supports 1D or 2D sources, got {a.shape}")


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm.

    Rejects zero vectors outright; silently adding an epsilon would make
    downstream similarity values quietly wrong.
    """
    a = as_tensor(a)
    ax = axis % a.data.ndim
    norms = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero vector")
    out = a.data / norms

    def grad_fn(g):
        radial = (g * out).sum(axis=ax, keepdims=True)
        return ((g - out * radial) / norms,)

    return Tensor(out, (a,), grad_fn)


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass, zero contribution in the backward pass."""
    a = as_tensor(a)
    return Tensor(a.data, (), None)


# -- backward pass -------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every node reachable from a scalar root.

    Repeated calls without ``zero_grad`` accumulate, matching the usual
    gradient-accumulation semantics.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    pass_grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pass_grads.get(id(node))
        if g is None:
            continue
        if node._grad_fn is not None:
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in pass_grads:
                    pass_grads[key] = pass_grads[key] + pg
                else:
                    pass_grads[key] = pg
    for node in order:
        g = pass_grads.get(id(node))
        if g is not None:
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def grad_of(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Max relative disagreement between backward and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` that
    rebuilds its graph on every call; parameters are perturbed in place
    while probing. Relative error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractViolation(f"step h={h} outside [1e-7, 1e-3]")
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("loss is not finite at the base point")
    zero_grads(params)
    backward(loss)
    analytic = [grad_of(p).copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = loss_fn().item()
            flat[i] = saved - h
            f_minus = loss_fn().item()
            flat[i] = saved
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise EvaluationError("loss is not finite at a probe point")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst


# -- AMTD binary tensor format -------------------------------------------

AMTD_MAGIC = b"AMTD"
AMTD_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def amtd_encode(values: np.ndarray, dtype_code: int = 0) -> bytes:
    """Serialize one array: magic, version, ndim, extents (u32 LE),
    dtype byte, then the row-major little-endian payload."""
    if dtype_code not in _DTYPES:
        raise ContractViolation(f"unknown AMTD dtype code {dtype_code}")
    arr = np.ascontiguousarray(values)
    header = AMTD_MAGIC + struct.pack("<II", AMTD_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("B", dtype_code)
    payload = arr.astype(_DTYPES[dtype_code]).tobytes(order="C")
    return header + payload


def amtd_decode(blob: bytes) -> np.ndarray:
    """Decode one AMTD record into a float64 array (values upcast)."""
    if blob[:4] != AMTD_MAGIC:
        raise ContractViolation(f"bad AMTD magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != AMTD_VERSION:
        raise ContractViolation(f"unsupported AMTD version {version}")
    offset = 12
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (code,) = struct.unpack_from("B", blob, offset)
    offset += 1
    if code not in _DTYPES:
        raise ContractViolation(f"unknown AMTD dtype code {code}")
    dtype = _DTYPES[code]
    count = math.prod(shape) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(blob) < expected:
        raise ContractViolation("truncated AMTD payload")
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return flat.astype(np.float64).reshape(shape)


def amtd_size(blob: bytes, offset: int = 0) -> int:
    """Byte length of the AMTD record starting at ``offset``."""
    if blob[offset:offset + 4] != AMTD_MAGIC:
        raise ContractViolation("bad AMTD magic")
    _, ndim = struct.unpack_from("<II", blob, offset + 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, offset + 12)
    (code,) = struct.unpack_from("B", blob, offset + 12 + 4 * ndim)
    if code not in _DTYPES:
        raise ContractViolation(f"unknown AMTD dtype code {code}")
    count = math.prod(shape) if shape else 1
    return 13 + 4 * ndim + count * _DTYPES[code].itemsize
