"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when produced by a differentiable
operation, remembers its parents and a closure that pushes the output gradient
back to them.  :meth:`Tensor.backward` orders the reachable graph
topologically and replays those closures in reverse, accumulating into
``grad`` buffers.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


class ContractError(RuntimeError):
    """A caller violated an API precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation paths)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None


class Tensor:
    """Dense float64 array that can take part in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = ""):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
        return Tensor(data, op=op)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor.

        Gradients add onto existing buffers; call ``zero_grad`` between
        passes to start fresh.
        """
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        # ``pending`` carries this pass's gradient; ``grad`` buffers accumulate
        # across passes.
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- binary elementwise ----------------------------------------------
    def _binary(self, other, fwd, bwd, op: str) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        out = fwd(a, b)

        def backward(g):
            ga, gb = bwd(g, a, b, out)
            return (_unbroadcast(ga, a.shape) if self.requires_grad else None,
                    _unbroadcast(gb, b.shape) if other.requires_grad else None)

        return Tensor._make(out, (self, other), backward, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: (g, -g), "sub")

    def __rsub__(self, other):
        return Tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide,
                            lambda g, a, b, o: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return Tensor(other).__truediv__(self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        a = self.data
        out = a ** exponent
        return Tensor._make(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    # -- unary elementwise -----------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        if np.any(a <= 0):
            raise DomainError("log of a non-positive value; clamp the argument first")
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sigmoid(self) -> "Tensor":
        a = self.data
        # Split by sign so exp never overflows.
        e = np.exp(-np.abs(a))
        out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def clamp_min(self, floor: float) -> "Tensor":
        """max(x, floor); gradient passes only where x was above the floor."""
        mask = self.data > floor
        out = np.where(mask, self.data, floor)
        return Tensor._make(out, (self,), lambda g: (g * mask,), "clamp_min")

    def scale(self, factor: float) -> "Tensor":
        factor = float(factor)
        return Tensor._make(self.data * factor, (self,), lambda g: (g * factor,), "scale")

    # -- reductions and shape --------------------------------------------
    def _check_axis(self, axis):
        if axis is not None and not -self.ndim <= axis < self.ndim:
            raise DimensionError(f"axis {axis} is invalid for shape {self.shape}")

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        self._check_axis(axis)
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(out, (self,), backward, "sum")

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        self._check_axis(axis)
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis, keepdims).scale(1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {src} into {shape}") from None
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        out = self.data.transpose(axes)
        return Tensor._make(out, (self,), lambda g: (g.transpose(inverse),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def take_rows(self, index) -> "Tensor":
        """Gather rows ``self[index]``; repeated indices accumulate on backward."""
        index = np.asarray(index, dtype=np.intp)
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward, "take_rows")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        self._check_axis(axis)
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)

        def backward(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (self,), backward, "log_softmax")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients ``a.grad += g bᵀ`` and ``b.grad += aᵀ g``."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return (g @ y.T if a.requires_grad else None,
                x.T @ g if b.requires_grad else None)

    return Tensor._make(x @ y, (a, b), backward, "matmul")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._make(data, tuple(parts), backward, "concat")


# -- convolution helpers (tinyconv) --------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation in NCHW layout.

    ``weight`` has shape (out_ch, in_ch, kh, kw).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, _, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # cols: (n, oh, ow, ic, kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ic * kh * kw)
    wmat = weight.data.reshape(oc, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, ic, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + oh, j:j + ow] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._make(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    cropped = x.data[:, :, :oh * size, :ow * size]
    windows = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, size * size)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, oh, ow, size * size))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros_like(x.data)
        full[:, :, :oh * size, :ow * size] = gw.reshape(n, c, oh * size, ow * size)
        return (full,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


# -- optimisation -----------------------------------------------------------

def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, weight_decay: float,
             velocity: list[np.ndarray]) -> None:
    """One heavy-ball SGD update, in place.

    ``v <- momentum * v + grad + weight_decay * param``, then
    ``param <- param - lr * v``.  Parameters without a gradient are skipped.
    """
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        if v.shape != p.shape:
            raise DimensionError(f"velocity {v.shape} does not match parameter {p.shape}")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


class SGD:
    """Stateful wrapper around :func:`sgd_step` holding the velocity buffers."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity)
