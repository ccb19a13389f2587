"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the output gradient to input gradients.
Nodes receive a monotonically increasing id at creation, so sorting the nodes
reachable from a root by id gives a valid topological order (inputs always
exist before the node that consumes them).

Broadcasting is deliberately narrow: binary elementwise ops accept operands of
equal shape, a python scalar, or an operand whose shape is a *suffix* of the
other's (bias vectors, positional tables, centers).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputeGraph",
    "DimensionError",
    "ParameterError",
    "ValidationError",
    "UsageError",
    "no_grad",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "binary_cross_entropy_with_logits",
    "concat",
    "backward",
    "AdamW",
    "adamw_step",
]


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Suspend graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    """A row-major float64 array with an optional accumulated gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        self._id = next(_ids)

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        needs = _grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = needs
        out._node = _Node(op, tuple(inputs), fn) if needs else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead > 0 else grad


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data + c, "add_scalar", (a,), lambda g: (g,))
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._result(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    return Tensor._result(ad ** p, "pow", (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Tensor._result(x * cdf, "gelu", (a,), lambda g: (g * (cdf + x * pdf),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
        lambda g: (g.transpose(inv),),
    )


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape
    out = a.data[index]
    if np.ndim(out) == 0:
        out = np.asarray(out)

    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def fn(g):
        full = np.zeros(src)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), "getitem", (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[d.shape for d in datas]}") from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return Tensor._result(out, "concat", tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    src = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), "sum", (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across ``a``'s leading axes or has
    exactly ``a``'s leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(out, "matmul", (a, b), fn)


# -- normalisation / probabilities -------------------------------------------

def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``x / temperature`` along the last axis."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / temperature,)

    return Tensor._result(p, "softmax", (x,), fn)


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return Tensor._result(out, "log_softmax", (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input width {d}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        gx = g * gd
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - gxhat_mean - xhat * proj)
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), fn)


def cross_entropy(p_target: Tensor, p_pred: Tensor, tol: float = 1e-6) -> Tensor:
    """``-sum(p_target * log(p_pred))`` along the last axis.

    Both arguments must be probability vectors (rows summing to one within
    ``tol``). A 1-D input yields a scalar; batched rows yield one value per row.
    """
    if p_target.shape != p_pred.shape:
        raise DimensionError(f"cross_entropy: {p_target.shape} vs {p_pred.shape}")
    t, p = p_target.data, p_pred.data
    if np.any(p <= 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValidationError("p_pred must be strictly positive and sum to 1")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > tol):
        raise ValidationError("p_target must be non-negative and sum to 1")
    logp = np.log(p)
    out = np.asarray(-(t * logp).sum(axis=-1))

    def fn(g):
        g = np.expand_dims(g, -1)
        return -g * logp, -g * t / p

    return Tensor._result(out, "cross_entropy", (p_target, p_pred), fn)


def binary_cross_entropy_with_logits(z: Tensor, y: float) -> Tensor:
    """Binary cross-entropy of ``sigmoid(z)`` against a 0/1 target, computed stably."""
    zd = z.data
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    out = np.logaddexp(0.0, zd) - zd * y
    return Tensor._result(np.asarray(out), "bce_logits", (z,), lambda g: (g * (_sigmoid(zd) - y),))


# -- graph ------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or t._node is None:
                continue
            seen[t._id] = t
            stack.extend(t._node.inputs)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever is already stored, so calling this twice on
    the same graph doubles the leaf gradients.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = graph or ComputeGraph.trace(root)
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(t._id, None)
        if g is None:
            continue
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp._id in grads:
                grads[inp._id] = grads[inp._id] + gi
            else:
                grads[inp._id] = gi


# -- optimiser --------------------------------------------------------------

def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> dict:
    """One AdamW update in place; ``state`` holds moments and the step count.

    Weight decay is decoupled: ``w -= lr * wd * w`` before the Adam step.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr if lr is None else lr,
                   self.betas[0], self.betas[1], self.eps, self.weight_decay)
