"""Dense float64 tensors with a small reverse-mode autodiff and SGD with momentum.

Only the primitives needed by the models and losses in this package are
provided. Every primitive records a closure that maps the upstream gradient
to gradients of its inputs; :func:`backward` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

LOG_CLAMP = 1e-12

ParameterSet = dict[str, np.ndarray]
GradientRecord = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...]):
        self.primitive = primitive
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class DegenerateVectorError(ValueError):
    """Raised when a zero-norm vector would be normalized."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: gradients never flow into the returned tensor."""
    return Tensor(np.array(as_tensor(x).data, copy=True))


def _node(data, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    """Elementwise add with numpy broadcasting (covers bias add)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
    )


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log; inputs below ``LOG_CLAMP`` are clamped (zero gradient there)."""
    a = as_tensor(a)
    clamped = a.data < LOG_CLAMP
    safe = np.where(clamped, LOG_CLAMP, a.data)
    return _node(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), back)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def l2_normalize(a) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateVectorError(
            f"l2_normalize: {int((norm == 0.0).sum())} zero-norm row(s) in shape {a.shape}"
        )
    y = a.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (a,), back)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    """Concatenate along the first axis."""
    ts = [as_tensor(t) for t in tensors]
    if axis != 0:
        raise ValueError("concat: only axis=0 is supported")
    tails = {t.shape[1:] for t in ts}
    if len(tails) > 1:
        raise ShapeError("concat", *(t.shape for t in ts))
    out = np.concatenate([t.data for t in ts], axis=0)
    bounds = np.cumsum([0] + [t.shape[0] for t in ts])

    def back(g):
        return tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(ts)))

    return _node(out, tuple(ts), back)


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), back)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine_similarity: zero-norm operand")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, parameters: Mapping[str, Tensor]) -> GradientRecord:
    """Gradients of a scalar ``loss`` with respect to leaf ``parameters``.

    Parameters that the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return {
        name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
        for name, t in parameters.items()
    }


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a ParameterSet as gradient-tracking leaf tensors."""
    return {name: Tensor(value, requires_grad=True) for name, value in params.items()}


def same_structure(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    if list(a) != list(b):
        return False
    return all(np.shape(a[k]) == np.shape(b[k]) for k in a)


@dataclass
class SgdMomentum:
    """Classical momentum: ``v <- momentum * v + grad``; ``theta <- theta - lr * v``."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def step(self, params: ParameterSet, grads: GradientRecord) -> ParameterSet:
        """Apply one update in place on ``params`` (values are replaced, not mutated)."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError("sgd_momentum_step", params[name].shape, g.shape)
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = params[name] - self.learning_rate * v
        return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    per_parameter: dict[str, float]

    @property
    def empty(self) -> bool:
        return self.checked == 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``.

    Below ``floor`` the comparison is effectively absolute (``floor * rtol``),
    because central-difference round-off (about eps * |loss| / step) swamps
    tiny gradient entries.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParameterSet,
    step: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    ``loss_fn`` maps a dict of tensors to a scalar tensor. Parameters with more
    than ``max_coords`` entries are checked on a seeded random subset.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed)
    tracked = leaves(params)
    analytic = backward(loss_fn(tracked), tracked)

    per: dict[str, float] = {}
    checked = 0
    for name, value in params.items():
        flat_size = value.size
        if max_coords is not None and flat_size > max_coords:
            coords = rng.choice(flat_size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat_size)
        worst = 0.0
        for c in coords:
            idx = np.unravel_index(int(c), value.shape)

            def at(delta):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][idx] += delta
                return float(loss_fn({k: Tensor(v) for k, v in shifted.items()}).data)

            numeric = (at(step) - at(-step)) / (2 * step)
            err = float(relative_error(np.array(analytic[name][idx]), np.array(numeric), floor))
            worst = max(worst, err)
            checked += 1
        per[name] = worst
    return GradCheckReport(max(per.values(), default=0.0), checked, per)
