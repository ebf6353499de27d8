"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` values.  The
same primitive functions accept plain ndarrays, in which case they compute
with numpy directly and record nothing, so a taped and an untaped evaluation
of one function run the identical arithmetic.

Only the primitives listed in ``PRIMITIVES`` are differentiable.  Numpy ufuncs
applied to a ``Var`` are routed to the matching primitive; anything else raises
:class:`UnsupportedOperationError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class UnsupportedOperationError(TypeError):
    pass


class StaleTapeError(RuntimeError):
    pass


class TapeMismatchError(ValueError):
    pass


class _Scatter:
    """Gradient contribution that lands in one index region of the parent."""

    __slots__ = ("key", "grad", "advanced")

    def __init__(self, key, grad, advanced):
        self.key = key
        self.grad = grad
        self.advanced = advanced


class Tape:
    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self.output: Var | None = None
        self.leaf: Var | None = None
        self.params = None
        self.consumed = False

    def __len__(self):
        return len(self._shapes)

    def variable(self, value) -> "Var":
        """Register a leaf."""
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def _push(self, value, parents, backward):
        if self.consumed:
            raise StaleTapeError("cannot record onto a tape that has been back-propagated")
        var = Var(value, self, len(self._shapes))
        self._parents.append(parents)
        self._backward.append(backward)
        self._shapes.append(np.shape(value))
        return var

    def gradients(self, output: "Var", seed=1.0, leaves: Sequence["Var"] = ()) -> list[np.ndarray]:
        """Back-propagate ``seed`` from ``output``; return gradients of ``leaves``.

        A tape can be back-propagated once.
        """
        if self.consumed:
            raise StaleTapeError("tape already consumed by a previous backward pass")
        if output.tape is not self:
            raise TapeMismatchError("output does not belong to this tape")
        self.consumed = True
        n = len(self._shapes)
        grads: list = [None] * n
        owned = [False] * n
        grads[output.index] = np.array(np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape))
        owned[output.index] = True
        keep = {leaf.index for leaf in leaves}
        for i in range(output.index, -1, -1):
            g = grads[i]
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            contributions = fn(g)
            for p, c in zip(self._parents[i], contributions):
                if c is None:
                    continue
                if isinstance(c, _Scatter):
                    if grads[p] is None:
                        grads[p] = np.zeros(self._shapes[p])
                        owned[p] = True
                    elif not owned[p]:
                        grads[p] = np.array(grads[p])
                        owned[p] = True
                    if c.advanced:
                        np.add.at(grads[p], c.key, c.grad)
                    else:
                        grads[p][c.key] += c.grad
                elif grads[p] is None:
                    grads[p] = c
                    owned[p] = False
                else:
                    grads[p] = grads[p] + c
                    owned[p] = True
            if i not in keep:
                grads[i] = None
        out = []
        for leaf in leaves:
            g = grads[leaf.index]
            out.append(np.zeros(leaf.shape) if g is None else np.array(g))
        return out


class Var:
    """An array value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, tape={id(self.tape):#x})"

    def __float__(self):
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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        raise UnsupportedOperationError(f"power {exponent!r} is not a registered primitive")

    # comparisons act on primal values and are not differentiable
    def __lt__(self, other):
        return self.value < _value(other)

    def __le__(self, other):
        return self.value <= _value(other)

    def __gt__(self, other):
        return self.value > _value(other)

    def __ge__(self, other):
        return self.value >= _value(other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        prim = _UFUNCS.get(ufunc) if method == "__call__" and not kwargs else None
        if prim is None:
            raise UnsupportedOperationError(f"numpy {ufunc.__name__}.{method} is not a registered primitive")
        return prim(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        prim = _FUNCTIONS.get(func)
        if prim is None:
            raise UnsupportedOperationError(f"numpy.{func.__name__} is not a registered primitive")
        return prim(*args, **kwargs)


def _value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatchError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _is_var(x):
    return isinstance(x, Var)


def _binary(a, b, value, grad_a, grad_b):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    sa, sb = np.shape(_value(a)), np.shape(_value(b))
    parents, fns = [], []
    if _is_var(a):
        parents.append(a.index)
        fns.append(lambda g: _unbroadcast(grad_a(g), sa))
    if _is_var(b):
        parents.append(b.index)
        fns.append(lambda g: _unbroadcast(grad_b(g), sb))
    return tape._push(value, tuple(parents), lambda g: [f(g) for f in fns])


def _unary(x, value, grad):
    if not _is_var(x):
        return value
    return x.tape._push(value, (x.index,), lambda g: [grad(g)])


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    return _binary(a, b, np.add(_value(a), _value(b)), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, np.subtract(_value(a), _value(b)), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _binary(a, b, np.multiply(av, bv), lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _value(a), _value(b)
    out = np.true_divide(av, bv)
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x):
    return _unary(x, np.negative(_value(x)), lambda g: -g)


def square(x):
    xv = _value(x)
    return _unary(x, np.multiply(xv, xv), lambda g: 2.0 * g * xv)


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    av, bv = _value(a), _value(b)
    pick_a = av >= bv
    return _binary(a, b, np.where(pick_a, av, bv),
                   lambda g: np.where(pick_a, g, 0.0), lambda g: np.where(pick_a, 0.0, g))


def relu(x):
    return maximum(x, 0.0)


# -- transcendental -------------------------------------------------------------

def exp(x):
    out = np.exp(_value(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = _value(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def sin(x):
    xv = _value(x)
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(x):
    xv = _value(x)
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv))


def sqrt(x):
    out = np.sqrt(_value(x))
    return _unary(x, out, lambda g: 0.5 * g / out)


def tanh(x):
    out = np.tanh(_value(x))
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def sigmoid(x):
    xv = _value(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def softplus(x):
    xv = _value(x)
    out = np.logaddexp(0.0, xv)
    return _unary(x, out, lambda g: g * 0.5 * (1.0 + np.tanh(0.5 * xv)))


def rnorm(x, axis=-1, keepdims=True):
    """Reciprocal Euclidean norm along ``axis``."""
    xv = _value(x)
    r = 1.0 / np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))
    out = r if keepdims else np.squeeze(r, axis=axis)
    return _unary(x, out, lambda g: -xv * r**3 * (g if keepdims else np.expand_dims(g, axis)))


# -- linear algebra and reductions ----------------------------------------------

def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., k) and ``b`` of shape (k, m) or (k,)."""
    av, bv = _value(a), _value(b)
    out = np.matmul(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    if bv.ndim not in (1, 2) or av.ndim < 1:
        raise UnsupportedOperationError("matmul supports (..., k) @ (k, m) and (..., k) @ (k,)")
    parents, fns = [], []
    if _is_var(a):
        parents.append(a.index)
        if bv.ndim == 2:
            fns.append(lambda g: g @ bv.T)
        else:
            fns.append(lambda g: np.multiply.outer(g, bv))
    if _is_var(b):
        parents.append(b.index)
        k = av.shape[-1]
        if bv.ndim == 2:
            fns.append(lambda g: av.reshape(-1, k).T @ g.reshape(-1, bv.shape[1]))
        else:
            fns.append(lambda g: av.reshape(-1, k).T @ np.reshape(g, -1))
    return tape._push(out, tuple(parents), lambda g: [f(g) for f in fns])


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv = _value(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    shape = np.shape(xv)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary(x, out, grad)


def mean(x, axis=None, keepdims=False):
    xv = _value(x)
    n = np.size(xv) if axis is None else np.prod([np.shape(xv)[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(x, axis=-1):
    xv = _value(x)
    return _unary(x, np.cumsum(xv, axis=axis),
                  lambda g: np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))


def reshape(x, shape):
    xv = _value(x)
    old = np.shape(xv)
    return _unary(x, np.reshape(xv, shape), lambda g: np.reshape(g, old))


def transpose(x, axes=None):
    xv = _value(x)
    inv = None if axes is None else np.argsort(axes)
    return _unary(x, np.transpose(xv, axes), lambda g: np.transpose(g, inv))


def _is_advanced(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def getitem(x, key, unique=False):
    """Index with a constant key; ``unique`` promises no repeated positions."""
    if isinstance(key, Var):
        raise UnsupportedOperationError("indices must be constant")
    xv = _value(x)
    advanced = _is_advanced(key) and not unique
    return _unary(x, xv[key], lambda g: _Scatter(key, g, advanced))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _binary(a, b, np.where(cond, _value(a), _value(b)),
                   lambda g: np.where(cond, g, 0.0), lambda g: np.where(cond, 0.0, g))


def concatenate(xs, axis=0):
    values = [_value(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([np.shape(v)[axis] for v in values])[:-1]
    parents = [x.index for x in xs if _is_var(x)]
    is_var = [_is_var(x) for x in xs]

    def grad(g):
        parts = np.split(g, bounds, axis=axis)
        return [p for p, v in zip(parts, is_var) if v]

    return tape._push(out, tuple(parents), grad)


def stack(xs, axis=0):
    return concatenate([expand_dims(x, axis) for x in xs], axis=axis)


def expand_dims(x, axis):
    xv = _value(x)
    return reshape(x, np.shape(np.expand_dims(xv, axis)))


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: neg,
    np.square: square,
    np.exp: exp,
    np.log: log,
    np.sin: sin,
    np.cos: cos,
    np.sqrt: sqrt,
    np.tanh: tanh,
    np.maximum: maximum,
    np.matmul: matmul,
}

_FUNCTIONS = {
    np.sum: sum,
    np.mean: mean,
    np.cumsum: cumsum,
    np.reshape: reshape,
    np.transpose: transpose,
    np.where: where,
    np.concatenate: concatenate,
    np.stack: stack,
    np.expand_dims: expand_dims,
}

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "square", "maximum", "relu", "exp", "log",
    "sin", "cos", "sqrt", "tanh", "sigmoid", "softplus", "rnorm", "matmul", "sum",
    "mean", "cumsum", "reshape", "transpose", "getitem", "where", "concatenate",
    "stack", "expand_dims",
)


# -- high level API ---------------------------------------------------------------

def value(x):
    """Primal value of ``x`` as an ndarray."""
    return np.asarray(_value(x))


def record(f, params):
    """Evaluate ``f(theta)`` on a fresh tape watching ``params.values``.

    Returns the primal output and the tape; pass the tape to :func:`backward`.
    """
    tape = Tape()
    theta = tape.variable(params.values)
    out = f(theta)
    tape.leaf = theta
    tape.params = params
    if isinstance(out, Var):
        tape.output = out
        return out.value, tape
    return np.asarray(out), tape


def backward(tape: Tape, seed=1.0) -> np.ndarray:
    """Back-propagate ``seed`` through a recorded tape.

    The gradient with respect to the watched parameters is returned and also
    accumulated into ``params.grad``.
    """
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a previous backward pass")
    params = tape.params
    if tape.output is None:
        tape.consumed = True
        return np.zeros_like(params.values)
    (grad,) = tape.gradients(tape.output, seed, [tape.leaf])
    params.grad += grad
    return grad


def value_and_grad(f, x, seed=1.0):
    """Return ``f(x)`` and the seeded vector-Jacobian product at ``x``."""
    tape = Tape()
    leaf = tape.variable(x)
    out = f(leaf)
    if not isinstance(out, Var):
        return np.asarray(out), np.zeros(np.shape(x))
    (grad,) = tape.gradients(out, seed, [leaf])
    return out.value, grad


def finite_difference_gradient(f, x, step=1e-5):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(np.sum(f(x)))
        flat[i] = orig - step
        lo = float(np.sum(f(x)))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)
