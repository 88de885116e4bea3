"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operators needed by the embedding networks and the training
objectives live here. Broadcasting is restricted to rank-0 operands; the
few row-wise patterns the losses need (bias add, row normalisation, the
kernel sums of the MMD bracket, soft-target cross-entropy) are explicit
operators with their own backward rules.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operator."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


# gradient of sqrt is defined as 0 at or below this value
SQRT_GRAD_EPS = 1e-12


class Tensor:
    """Dense float64 array with an optional gradient and graph linkage.

    Tensors created by operators keep a reference to their parents and a
    closure that pushes the output gradient back to them. Leaves created by
    the user carry ``requires_grad`` and receive accumulated ``grad`` after
    :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ---------------------------------------------------------------- graph
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        rg = False
        for p in parents:
            if p.requires_grad:
                rg = True
                break
        out.requires_grad = rg
        out.op = op
        if rg:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with ``requires_grad``.

        Gradients accumulate: calling twice without zeroing adds the second
        pass onto the first. Interior nodes get a fresh gradient each pass.
        """
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor with no recorded graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only rank-0 broadcasting is allowed
    return np.asarray(g.sum()).reshape(shape)


def _first_bad_index(mask: np.ndarray) -> tuple:
    return tuple(int(i) for i in np.argwhere(mask)[0])


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    zero = b.data == 0
    if np.any(zero):
        raise DomainError(f"div: division by zero at index {_first_bad_index(np.atleast_1d(zero))}")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = a.data <= 0
    if np.any(bad):
        raise DomainError(f"log: non-positive input at index {_first_bad_index(np.atleast_1d(bad))}")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root; the derivative is taken as 0 where the input is ~0."""
    a = as_tensor(a)
    bad = a.data < 0
    if np.any(bad):
        raise DomainError(f"sqrt: negative input at index {_first_bad_index(np.atleast_1d(bad))}")
    out = np.sqrt(a.data)

    def backward(g):
        safe = a.data > SQRT_GRAD_EPS
        local = np.where(safe, 0.5 / np.where(safe, out, 1.0), 0.0)
        return (g * local,)

    return Tensor._result(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def max_with_scalar(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)``; ties send no gradient to ``a``."""
    a = as_tensor(a)
    mask = a.data > c
    return Tensor._result(np.where(mask, a.data, float(c)), (a,), lambda g: (g * mask,), "max_scalar")


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# -------------------------------------------------------------------- linear
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x, bias) -> Tensor:
    """Add a length-C vector to every row of an N×C matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return Tensor._result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}) invalid for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._result(a.data[:, start:stop].copy(), (a,), backward, "slice_cols")


def gather(a, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` into a vector."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return Tensor._result(a.data[rows, cols].copy(), (a,), backward, "gather")


def take(a, index: int) -> Tensor:
    """Single element of a vector as a scalar tensor."""
    a = as_tensor(a)
    if a.ndim != 1 or not 0 <= index < a.shape[0]:
        raise DimensionError(f"take: index {index} invalid for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._result(np.asarray(a.data[index]), (a,), backward, "take")


def _check_axis(a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not 0 <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DomainError("reduction over an empty axis")


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    _check_axis(a, axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return Tensor._result(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def max(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    _check_axis(a, axis)
    if axis is None:
        idx = int(np.argmax(a.data))

        def backward(g):
            full = np.zeros(a.size)
            full[idx] = g
            return (full.reshape(a.shape),)

        return Tensor._result(np.asarray(a.data.flat[idx]), (a,), backward, "max")

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._result(out, (a,), backward, "max")


# ------------------------------------------------------------------- softmax
def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    _check_temperature(temperature)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: expected N×C, got {x.shape}")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return Tensor._result(p, (x,), backward, "softmax_rows")


def log_softmax_rows(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    _check_temperature(temperature)
    if x.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected N×C, got {x.shape}")
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)

    return Tensor._result(out, (x,), backward, "log_softmax_rows")


# ------------------------------------------------------- row-wise geometry
def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected N×d, got {x.shape}")
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise DomainError(f"l2_normalize_rows: zero-norm row {int(np.argmin(norms))}")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._result(y, (x,), backward, "l2_normalize_rows")


def rbf_mmd_bracket(a, b, sigma2s) -> Tensor:
    """``sum K(a,a) - 2 sum K(a,b) + sum K(b,b)`` for the summed Gaussian kernel.

    All N*N pairs of each block are included (i=j terms too). ``sigma2s`` is
    a sequence of σ² values or a callable mapping the condensed pairwise
    squared distances of the pooled rows to one; bandwidths are constants.
    Each pair distance is computed independently and blocks are summed
    separately, so identical inputs give exactly zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"rbf_mmd_bracket: shapes {a.shape} and {b.shape} must match")
    z = np.concatenate([a.data, b.data], axis=0)
    cond = pdist(z, "sqeuclidean")
    s2 = np.asarray(sigma2s(cond) if callable(sigma2s) else sigma2s, dtype=np.float64)
    if s2.size == 0 or np.any(s2 <= 0):
        raise DomainError(f"rbf_mmd_bracket: bandwidths must be positive, got {s2}")
    sq = squareform(cond)
    k = np.zeros_like(sq)
    dk = np.zeros_like(sq)
    for v in s2.ravel():
        e = np.exp(sq * (-0.5 / v))
        k += e
        dk -= e * (0.5 / v)
    n = a.shape[0]
    out = k[:n, :n].sum() - 2.0 * k[:n, n:].sum() + k[n:, n:].sum()

    def backward(g):
        w = g * dk
        w[:n, n:] *= -1.0
        w[n:, :n] *= -1.0
        # sum_ij w_ij ||z_i - z_j||^2 with w symmetric
        gz = 4.0 * (w.sum(axis=1)[:, None] * z - w @ z)
        return gz[:n], gz[n:]

    return Tensor._result(np.asarray(out), (a, b), backward, "rbf_mmd_bracket")


def soft_cross_entropy(targets, logits, temperature: float = 1.0) -> Tensor:
    """``-(1/N) sum_i sum_k targets_ik log softmax(logits_i / T)_k``; targets are constants."""
    logits = as_tensor(logits)
    _check_temperature(temperature)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"soft_cross_entropy: targets {t.shape} vs logits {logits.shape}")
    n = logits.shape[0]
    z = logits.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = -(t * logq).sum() / n

    def backward(g):
        q = np.exp(logq)
        return (g * (q * t.sum(axis=1, keepdims=True) - t) / (n * temperature),)

    return Tensor._result(np.asarray(out), (logits,), backward, "soft_cross_entropy")
