"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors created without a tape are constants: primitives over constants only
compute values and record nothing, which is how inference runs.

Values are numpy arrays of any rank; the model code uses rank 1 (a single
vector) or rank 2 (a batch of row vectors).
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

SOFTPLUS_SWITCH = 30.0
SOFTPLUS_FLOOR = 1e-30


class NumericsError(ValueError):
    """Base class for tensor errors."""


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class Tensor:
    """An immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor({self.value!r}, {tag})"

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications plus a parameter registry.

    Nodes are appended as they are computed, so operands always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Callable | None]] = []
        self.params: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, operands, adjoint) -> Tensor:
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append((operands, adjoint))
        return t

    def parameter(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = self._push(np.array(value, dtype=np.float64), (), None)
        self.params[name] = t
        return t

    def bind(self, values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Register every array in ``values`` as a parameter."""
        return {k: self.parameter(k, v) for k, v in values.items()}

    def leaf(self, value) -> Tensor:
        """A differentiable input that is not a registered parameter."""
        return self._push(np.array(value, dtype=np.float64), (), None)

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        return backward(self, root)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constants(values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in values.items()}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(operands: Iterable[Tensor]) -> "Tape | None":
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise NumericsError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(kind: str, value, operands: tuple[Tensor, ...], adjoint) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    tape = _tape_of(operands)
    if tape is None:
        return Tensor(value)
    return tape._push(value, operands, adjoint)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- primitives


def fused(kind: str, value, operands, adjoint) -> Tensor:
    """Record a composite operation as a single node.

    ``adjoint`` maps the output adjoint to one gradient per operand, like the
    built-in primitives. Hot paths use this to keep the tape short.
    """
    return _emit(kind, value, tuple(_as_tensor(o) for o in operands), adjoint)


def _as_matrix(v: np.ndarray) -> np.ndarray:
    return v if v.ndim == 2 else v[None, :]


def _elu_value(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ELU and its derivative."""
    neg = np.expm1(np.minimum(x, 0.0))
    pos = x >= 0
    return np.where(pos, x, neg), np.where(pos, 1.0, neg + 1.0)


def dense(x, W, b, kind: str | None = None) -> Tensor:
    """``act(x @ W + b)`` as one node; ``kind`` is None, "elu" or "softplus"."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: shapes {x.shape} @ {W.shape} + {b.shape} do not conform")
    xv, Wv = x.value, W.value
    pre = xv @ Wv + b.value
    if kind is None:
        out, slope = pre, None
    elif kind == "elu":
        out, slope = _elu_value(pre)
    elif kind == "softplus":
        out, slope = _softplus(pre), expit(pre)
    else:
        raise ValueError(f"unsupported dense activation {kind!r}")

    def adjoint(g):
        gp = g if slope is None else g * slope
        g2, x2 = _as_matrix(gp), _as_matrix(xv)
        return (_unbroadcast(gp @ Wv.T, xv.shape), x2.T @ g2, g2.sum(axis=0))

    return _emit("dense", out, (x, W, b), adjoint)



def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1 or 2 operands, got {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def adjoint(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), adjoint)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("hadamard", a, b)
    av, bv = a.value, b.value
    return _emit("hadamard", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv  # non-finite results are reported by _emit

    def adjoint(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _emit("div", out, (a, b), adjoint)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tensors, adjoint)


def take(a, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along the last axis."""
    a = _as_tensor(a)
    shape = a.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("take", a.value[..., start:stop], (a,), adjoint)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.value.sum(axis=axis), (a,), adjoint)


def tensor_primitive(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise NumericsError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(operands, **kwargs)
    return fn(*operands, **kwargs)


# --------------------------------------------------------------- activations


def _softplus(x: np.ndarray) -> np.ndarray:
    big = x > SOFTPLUS_SWITCH
    safe = np.where(big, 0.0, x)
    out = np.where(big, x + np.log1p(np.exp(-np.where(big, x, 0.0))), np.log1p(np.exp(safe)))
    # exp underflows below about -745; the floor keeps deviations strictly positive
    return np.maximum(out, SOFTPLUS_FLOOR)


def elu(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv >= 0, xv, neg)
    return _emit("elu", out, (x,), lambda g: (g * np.where(xv >= 0, 1.0, neg + 1.0),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.value
    return _emit("softplus", _softplus(xv), (x,), lambda g: (g * expit(xv),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.value)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.value)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


ACTIVATIONS = {"elu": elu, "softplus": softplus, "sigmoid": sigmoid, "tanh": tanh}


def activation(kind: str, x) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise NumericsError(f"unknown activation {kind!r}") from None


PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "hadamard": hadamard, "div": div,
    "concat": concat, "take": take, "scale": scale, "square": square,
    "sqrt": sqrt, "log": log, "exp": exp, "sum": sum,
}


# ------------------------------------------------------------------ backward


def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to every tape parameter.

    Parameters the root does not depend on get zero gradients.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise NumericsError("root is not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.index] = np.ones_like(root.value)
    for i in range(root.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        operands, adjoint = tape.nodes[i]
        if adjoint is None:
            continue
        for op, og in zip(operands, adjoint(g)):
            if op.tape is None:
                continue
            j = op.index
            grads[j] = og if grads[j] is None else grads[j] + og
    out = {}
    for name, p in tape.params.items():
        g = grads[p.index]
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def value_and_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    bound = tape.bind(params)
    root = loss_fn(bound)
    return float(root.value), backward(tape, root)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from turning round-off into huge
    ratios; below it the comparison is effectively absolute.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn, params: Mapping[str, np.ndarray], eps: float,
                     order: int = 2) -> dict[str, np.ndarray]:
    """Central-difference gradient, evaluated without a tape.

    ``order=2`` is the two-point stencil; ``order=4`` the five-point one,
    whose O(eps^4) truncation allows a larger ``eps`` and less round-off.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    stencil = ((1.0, 0.5), (-1.0, -0.5)) if order == 2 else \
        ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12))

    def f(vals):
        return float(loss_fn(constants(vals)).value)

    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for step, weight in stencil:
                flat[i] = orig + step * eps
                total += weight * f(base)
            flat[i] = orig
            gflat[i] = total / eps
        out[name] = g
    return out


def gradient_check(loss_fn, params: Mapping[str, np.ndarray], eps: float = 1e-5,
                   floor: float = 1e-4, order: int = 2) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` maps a dict of parameter tensors to a scalar tensor and must be
    deterministic; it is called once on a tape and ``2 * n_params`` times
    without one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    first = float(loss_fn(constants(params)).value)
    second = float(loss_fn(constants(params)).value)
    if first != second:
        raise NumericsError("loss_fn is not deterministic; freeze its random draws")
    _, analytic = value_and_grad(loss_fn, params)
    numeric = numeric_gradient(loss_fn, params, eps, order)
    worst = 0.0
    for name in analytic:
        err = relative_error(analytic[name], numeric[name], floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
