"""Minimal reverse-mode automatic differentiation over float64 arrays.

Each :class:`Tensor` records its parents and a closure that pushes the
upstream gradient back to them. ``backward`` walks the graph in reverse
topological order. The operation set is deliberately small: affine maps,
tanh/ReLU, exp/log, (log-)softmax, sums, gathers, elementwise min/clip
and stop-gradient, which is everything the training losses use.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def back(g):
            self._accumulate(g)
            other._accumulate(g)

        return Tensor(self.data + other.data, parents=(self, other), backward=back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, parents=(self,), backward=lambda g: self._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor.lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor.lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def back(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)

        return Tensor(self.data * other.data, parents=(self, other), backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor.lift(other)

        def back(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / other.data**2)

        return Tensor(self.data / other.data, parents=(self, other), backward=back)

    def __matmul__(self, other) -> "Tensor":
        other = Tensor.lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GraphError("matmul is defined for 2-D operands only")

        def back(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        return Tensor(self.data @ other.data, parents=(self, other), backward=back)

    # -- shape ops --------------------------------------------------------------
    def __getitem__(self, idx) -> "Tensor":
        def back(g):
            full = np.zeros_like(self.data)
            if isinstance(idx, (slice, int)):
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(self.data[idx], parents=(self,), backward=back)

    def reshape(self, *shape) -> "Tensor":
        old = self.data.shape
        return Tensor(
            self.data.reshape(*shape),
            parents=(self,),
            backward=lambda g: self._accumulate(g.reshape(old)),
        )

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,), backward=back)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def gather(self, index: np.ndarray) -> "Tensor":
        """Row-wise pick: ``out[i] = self[i, index[i]]`` for a 2-D tensor."""
        rows = np.arange(self.data.shape[0])
        return self[rows, np.asarray(index)]

    # -- nonlinearities -----------------------------------------------------------
    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: self._accumulate(g * (1.0 - out**2)))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor(self.data * mask, parents=(self,), backward=lambda g: self._accumulate(g * mask))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: self._accumulate(g * out))

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise GraphError("log of a non-positive value")
        return Tensor(np.log(self.data), parents=(self,), backward=lambda g: self._accumulate(g / self.data))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)

        def back(g):
            self._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor(out, parents=(self,), backward=back)

    def softmax(self, axis: int = -1) -> "Tensor":
        return self.log_softmax(axis).exp()

    def clip(self, lo: float, hi: float) -> "Tensor":
        inside = (self.data >= lo) & (self.data <= hi)
        return Tensor(
            np.clip(self.data, lo, hi),
            parents=(self,),
            backward=lambda g: self._accumulate(g * inside),
        )

    def min_const(self, c: float) -> "Tensor":
        """``min(c, x)``: gradient 1 where x < c, 0 where x >= c."""
        below = self.data < c
        return Tensor(
            np.where(below, self.data, c),
            parents=(self,),
            backward=lambda g: self._accumulate(g * below),
        )

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- driver ---------------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar loss")
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
                if id(p) not in seen:
                    stack.append((p, False))
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on exact ties the gradient is split evenly."""
    a, b = Tensor.lift(a), Tensor.lift(b)
    wa = np.where(a.data < b.data, 1.0, np.where(a.data == b.data, 0.5, 0.0))

    def back(g):
        a._accumulate(g * wa)
        b._accumulate(g * (1.0 - wa))

    return Tensor(np.minimum(a.data, b.data), parents=(a, b), backward=back)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor.lift(x).detach()


def value_and_grad(fn: Callable[[Tensor], Tensor], theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate ``fn`` at a flat parameter vector and return its gradient."""
    leaf = Tensor(theta, requires_grad=True)
    loss = fn(leaf)
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return loss.item(), grad


def numeric_grad(fn: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5,
                 coords: Iterable[int] | None = None) -> np.ndarray:
    """Central finite differences, the independent check on ``backward``."""
    theta = np.array(theta, dtype=np.float64)
    out = np.zeros_like(theta)
    for i in range(theta.size) if coords is None else coords:
        old = theta.flat[i]
        theta.flat[i] = old + h
        up = fn(theta)
        theta.flat[i] = old - h
        down = fn(theta)
        theta.flat[i] = old
        out.flat[i] = (up - down) / (2 * h)
    return out
