"""
Small reverse-mode differentiation over dense float64 arrays.

Only the operations the models need are provided: matmul, broadcasting add,
ReLU, the two losses and `Tensor.from_op` for custom nodes such as the
quantizers, whose backward rule is supplied by the caller.
"""

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """
        Node whose parents receive `backward(out_grad)[i]`.

        The backward function returns one gradient (or None) per parent.
        """
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._prev = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        topo = []
        visited = set()

        def build_topo(node: "Tensor") -> None:
            if id(node) in visited:
                return
            visited.add(id(node))
            for parent in node._prev:
                build_topo(parent)
            topo.append(node)

        build_topo(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)

        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._prev, node._backward(node.grad)):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def __add__(self, other: "Tensor") -> "Tensor":
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor.from_op(self.data + other.data, (self, other), backward)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor.from_op(a @ b, (self, other), backward)

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def backward(g):
            return (np.where(mask, g, 0.0),)

        return Tensor.from_op(np.where(mask, self.data, 0.0), (self,), backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """1/2 * mean over rows of the summed squared error."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - target
    n = max(pred.shape[0], 1)

    def backward(g):
        return (g * diff / n,)

    return Tensor.from_op(np.asarray(0.5 * np.sum(diff * diff) / n), (pred,), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; labels are integer class ids."""
    labels = np.asarray(labels).astype(np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -np.mean(logp[rows, labels]) if n else 0.0

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (g * grad / max(n, 1),)

    return Tensor.from_op(np.asarray(loss), (logits,), backward)
