"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable computation in this package is built from the
primitives registered here. A Tensor wraps a numpy array; operations
record their inputs and a backward closure, and creation order doubles as
topological order, so `backward` can replay the implicit tape by walking
node ids in reverse. Everything runs in 64-bit floats: the reconciliation
projector amplifies rounding error, so no float32 path is offered.

Custom fused operations (e.g. the recurrent encoder kernel) can join the
tape through `from_op`.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_node_ids = itertools.count()
_grad_enabled = True
_strict_checks = True

PRIMITIVES: dict[str, Callable] = {}


def _register(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn
    return deco


def primitive_set() -> dict[str, Callable]:
    """Catalog of the registered differentiable primitives."""
    return dict(PRIMITIVES)


def set_strict_checks(flag: bool) -> None:
    """Toggle the non-finite guard applied to every forward result."""
    global _strict_checks
    _strict_checks = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional entry on the differentiation tape."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if _strict_checks and not np.all(np.isfinite(arr)):
            raise FloatingPointError(
                f"non-finite values in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.grad = np.array(g, dtype=np.float64) if self.grad is None else self.grad + g

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an externally computed forward result as a tape node.

    `backward_fn(out)` must push gradient contributions into the parents
    via `accumulate_grad`; it is only invoked for parents that require
    gradients.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar root.

    Gradients accumulate additively into `.grad` over the whole reachable
    graph. Returns a map from node id to gradient for `params` (zeros for
    parameters the root does not depend on). Creation order is
    topological by construction, so nodes are visited exactly once, in
    decreasing id order.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    nodes = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack.extend(node._parents)
    root.accumulate_grad(np.ones_like(root.data))
    for _, node in sorted(nodes.items(), reverse=True):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    out = {}
    if params is not None:
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            out[p.node_id] = Tensor(g)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return from_op(a.data + b.data, (a, b), bwd, "add")


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(out.grad, b.shape))

    return from_op(a.data - b.data, (a, b), bwd, "sub")


@_register("neg")
def neg(a: Tensor) -> Tensor:
    def bwd(out):
        a.accumulate_grad(-out.grad)

    return from_op(-a.data, (a,), bwd, "neg")


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return from_op(a.data * b.data, (a, b), bwd, "mul")


@_register("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def bwd(out):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return from_op(a.data / b.data, (a, b), bwd, "div")


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def bwd(out):
        if a.requires_grad:
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return from_op(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


@_register("transpose")
def transpose(a: Tensor, axes=None) -> Tensor:
    axes_t = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))

    def bwd(out):
        a.accumulate_grad(np.transpose(out.grad, np.argsort(axes_t)))

    return from_op(np.transpose(a.data, axes_t), (a,), bwd, "transpose")


@_register("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(out):
        a.accumulate_grad(out.grad.reshape(a.shape))

    return from_op(a.data.reshape(shape), (a,), bwd, "reshape")


@_register("broadcast_to")
def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(out):
        a.accumulate_grad(_unbroadcast(out.grad, a.shape))

    return from_op(np.broadcast_to(a.data, shape), (a,), bwd, "broadcast_to")


@_register("concat")
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return from_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, bwd, "concat")


@_register("slice")
def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(out):
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        a.accumulate_grad(g)

    return from_op(a.data[idx], (a,), bwd, "slice")


@_register("sum")
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


@_register("mean")
def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bwd(out):
        g = out.grad / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


@_register("exp")
def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)

    def bwd(out):
        a.accumulate_grad(out.grad * val)

    return from_op(val, (a,), bwd, "exp")


@_register("log")
def log(a: Tensor) -> Tensor:
    def bwd(out):
        a.accumulate_grad(out.grad / a.data)

    return from_op(np.log(a.data), (a,), bwd, "log")


@_register("tanh")
def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)

    def bwd(out):
        a.accumulate_grad(out.grad * (1.0 - val * val))

    return from_op(val, (a,), bwd, "tanh")


@_register("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    val = expit(a.data)

    def bwd(out):
        a.accumulate_grad(out.grad * val * (1.0 - val))

    return from_op(val, (a,), bwd, "sigmoid")


@_register("elu")
def elu(a: Tensor) -> Tensor:
    """Exponential linear unit, unit slope for x > 0 and e^x - 1 below."""
    val = np.where(a.data > 0, a.data, np.expm1(a.data))

    def bwd(out):
        a.accumulate_grad(out.grad * np.where(a.data > 0, 1.0, val + 1.0))

    return from_op(val, (a,), bwd, "elu")


@_register("softmax")
def softmax(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, shift-stabilized."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)

    def bwd(out):
        inner = (out.grad * val).sum(axis=-1, keepdims=True)
        a.accumulate_grad(val * (out.grad - inner))

    return from_op(val, (a,), bwd, "softmax")


@_register("abs")
def absval(a: Tensor) -> Tensor:
    def bwd(out):
        a.accumulate_grad(out.grad * np.sign(a.data))

    return from_op(np.abs(a.data), (a,), bwd, "abs")


@_register("square")
def square(a: Tensor) -> Tensor:
    def bwd(out):
        a.accumulate_grad(out.grad * 2.0 * a.data)

    return from_op(a.data * a.data, (a,), bwd, "square")


@_register("sqrt")
def sqrt(a: Tensor) -> Tensor:
    val = np.sqrt(a.data)

    def bwd(out):
        a.accumulate_grad(out.grad * 0.5 / val)

    return from_op(val, (a,), bwd, "sqrt")


@_register("trace")
def trace(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"trace: expected a square matrix, got {a.shape}")

    def bwd(out):
        a.accumulate_grad(out.grad * np.eye(a.shape[0]))

    return from_op(np.trace(a.data), (a,), bwd, "trace")


@_register("l2_norm")
def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor (zero-safe subgradient)."""
    val = float(np.sqrt(np.sum(a.data * a.data)))

    def bwd(out):
        g = a.data / val if val > 0 else np.zeros_like(a.data)
        a.accumulate_grad(out.grad * g)

    return from_op(val, (a,), bwd, "l2_norm")


def fro_norm(a: Tensor) -> Tensor:
    """Frobenius norm; identical to the flattened Euclidean norm."""
    return l2_norm(a)


PRIMITIVES["fro_norm"] = fro_norm


def grad_check(f, inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a pure scalar-valued function of the given tensors. The
    relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    grads = backward(out, inputs)
    worst = 0.0
    for t in inputs:
        analytic = grads[t.node_id].data
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f(*inputs).item()
                flat[i] = orig - h
                lo = f(*inputs).item()
                flat[i] = orig
                num[i] = (hi - lo) / (2.0 * h)
        num = num.reshape(t.shape)
        err = np.abs(analytic - num) / np.maximum(1.0, np.abs(analytic))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


@dataclass
class AdamState:
    """Adam moment estimates keyed by parameter node id."""

    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to the parameters in place.

    `grads` defaults to the accumulated `.grad` fields. Parameter updates
    use the learning rate currently set on the state.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            label = p.name if p.name else f"node {p.node_id}"
            raise FloatingPointError(f"non-finite gradient for parameter {label}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m = state.first_moment.setdefault(p.node_id, np.zeros_like(p.data))
        v = state.second_moment.setdefault(p.node_id, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
