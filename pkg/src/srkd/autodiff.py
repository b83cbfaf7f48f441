"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The op set is exactly what the distillation losses and the tiny encoders
need: elementwise arithmetic with broadcasting, matmul, exp/log/tanh,
reductions, row gathering, k-NN mean aggregation, row L2 normalization and
row softmax. Gradients are checked against central finite differences in
the test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the tape edges needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_edges")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        # list of (parent Tensor, vjp: upstream grad -> parent grad contribution)
        self._edges: list[tuple["Tensor", Callable[[Array], Array]]] = []

    # -- construction -------------------------------------------------------

    @staticmethod
    def from_op(data: Array, edges: Sequence[tuple["Tensor", Callable]]) -> "Tensor":
        """Build a tensor produced by a (possibly fused) differentiable op."""
        live = [(p, f) for p, f in edges if p.requires_grad]
        out = Tensor(data, requires_grad=bool(live))
        out._edges = live
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable .grad."""
        if self.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data):
            raise NumericError("backward called on a non-finite loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._edges:  # leaf parameter
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in node._edges:
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        o = self._coerce(other)
        return Tensor.from_op(self.data + o.data, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (o, lambda g: _unbroadcast(g, o.data.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        return Tensor.from_op(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other):
        o = self._coerce(other)
        return Tensor.from_op(self.data - o.data, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (o, lambda g: _unbroadcast(-g, o.data.shape)),
        ])

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        o = self._coerce(other)
        return Tensor.from_op(self.data * o.data, [
            (self, lambda g: _unbroadcast(g * o.data, self.data.shape)),
            (o, lambda g: _unbroadcast(g * self.data, o.data.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        return Tensor.from_op(self.data / o.data, [
            (self, lambda g: _unbroadcast(g / o.data, self.data.shape)),
            (o, lambda g: _unbroadcast(-g * self.data / (o.data * o.data),
                                       o.data.shape)),
        ])

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p: float):
        return Tensor.from_op(self.data ** p, [
            (self, lambda g: g * p * self.data ** (p - 1)),
        ])

    def __matmul__(self, other):
        o = self._coerce(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.data.shape[1] != o.data.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {self.shape} @ {o.shape}")
        return Tensor.from_op(self.data @ o.data, [
            (self, lambda g: g @ o.data.T),
            (o, lambda g: self.data.T @ g),
        ])

    @property
    def T(self) -> "Tensor":
        return Tensor.from_op(self.data.T, [(self, lambda g: g.T)])

    # -- elementwise transcendentals -----------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor.from_op(out, [(self, lambda g: g * out)])

    def log(self):
        return Tensor.from_op(np.log(self.data), [(self, lambda g: g / self.data)])

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor.from_op(out, [(self, lambda g: g * (1.0 - out * out))])

    def square(self):
        return Tensor.from_op(self.data * self.data,
                              [(self, lambda g: g * 2.0 * self.data)])

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape).copy()

        return Tensor.from_op(out, [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- structural ops ------------------------------------------------------

    def gather_rows(self, idx: Array) -> "Tensor":
        """Select rows by index; duplicate indices accumulate in the vjp."""
        idx = np.asarray(idx, dtype=np.intp)

        def vjp(g):
            out = np.zeros_like(self.data)
            np.add.at(out, idx, g)
            return out

        return Tensor.from_op(self.data[idx], [(self, vjp)])

    def neighbor_mean(self, idx: Array) -> "Tensor":
        """Row-wise mean over k neighbor rows; idx has shape (N, k)."""
        idx = np.asarray(idx, dtype=np.intp)
        k = idx.shape[1]
        out = self.data[idx].mean(axis=1)

        def vjp(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, idx.ravel(), np.repeat(g, k, axis=0) / k)
            return gx

        return Tensor.from_op(out, [(self, vjp)])

    def l2_normalize_rows(self, eps: float = 1e-12) -> "Tensor":
        """Divide each row by max(||row||_2, eps); zero rows stay zero."""
        norms = np.linalg.norm(self.data, axis=-1, keepdims=True)
        denom = np.maximum(norms, eps)
        out = self.data / denom
        big = norms > eps

        def vjp(g):
            proj = (out * g).sum(axis=-1, keepdims=True)
            gx = (g - np.where(big, out * proj, 0.0)) / denom
            return gx

        return Tensor.from_op(out, [(self, vjp)])

    def softmax_rows(self, temperature: float = 1.0) -> "Tensor":
        """Numerically stable softmax over the last axis."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if not np.isfinite(self.data).all():
            raise NumericError("softmax input must be finite")
        s = self * (1.0 / temperature)
        shift = Tensor(s.data.max(axis=-1, keepdims=True))  # detached, exact
        e = (s - shift).exp()
        return e / e.sum(axis=-1, keepdims=True)

    def log_softmax_rows(self, temperature: float = 1.0) -> "Tensor":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        s = self * (1.0 / temperature)
        shift = Tensor(s.data.max(axis=-1, keepdims=True))
        z = s - shift
        return z - z.exp().sum(axis=-1, keepdims=True).log()


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    datas = [t.data for t in tensors]
    widths = {d.shape[1] for d in datas}
    if len(widths) != 1:
        raise ShapeError("concat_rows requires a common column count")
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])
    edges = []
    for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
        edges.append((t, lambda g, lo=lo, hi=hi: g[lo:hi]))
    return Tensor.from_op(np.concatenate(datas, axis=0), edges)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a recorded scalar loss."""
    loss.backward()


def finite_diff_gradient(f: Callable[[Array], float], theta: Array,
                         h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(theta))
        flat[k] = orig - h
        fm = float(f(theta))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
