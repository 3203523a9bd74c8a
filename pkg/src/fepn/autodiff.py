"""A small reverse-mode differentiation tape over numpy arrays.

Every ``Var`` produced by an op remembers its parents and a closure that
maps the upstream gradient to parent gradients.  Graph edges are recorded
only when some input requires a gradient, so the same model code runs at
plain numpy speed for inference and finite-difference sweeps.

    >>> x = Var(np.array([1.0, 2.0]), requires_grad=True)
    >>> y = (x * x).sum()
    >>> grads = gradients(y, {"x": x})
    >>> grads["x"]
    array([2., 4.])
"""

import numpy as np

from . import special

__all__ = [
    "Var",
    "as_var",
    "gradients",
    "exp",
    "log",
    "log1p",
    "tanh",
    "softplus",
    "sigmoid",
    "digamma",
    "log_gamma",
    "clip",
    "relu",
    "logsumexp",
    "take",
    "take_rows",
    "assemble",
    "scatter",
    "where",
    "tanh_mlp",
]


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _grad_for(parent, g, factor=None):
    """Gradient passed to ``parent``: g (times ``factor``) reduced to the
    parent's shape, or None when the parent needs no gradient."""
    if not parent.requires_grad:
        return None
    if factor is not None:
        g = g * factor
    return _unbroadcast(g, parent.shape)


class Var:
    """A node on the tape: a float64 array plus how to differentiate it."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False):
        self.value = special._float(value)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, value, parents, backward):
        out = cls(value)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.value!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        other = as_var(other)
        return Var._from_op(
            self.value + other.value,
            (self, other),
            lambda g: (_grad_for(self, g), _grad_for(other, g)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_var(other)
        return Var._from_op(
            self.value - other.value,
            (self, other),
            lambda g: (_grad_for(self, g), _grad_for(other, g, -1.0)),
        )

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        return Var._from_op(
            a * b,
            (self, other),
            lambda g: (_grad_for(self, g, b), _grad_for(other, g, a)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        out = a / b
        return Var._from_op(
            out,
            (self, other),
            lambda g: (
                _grad_for(self, g / b),
                _grad_for(other, g, -out / b),
            ),
        )

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __neg__(self):
        return Var._from_op(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Var._from_op(a**k, (self,), lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects 2-d operands")
        return Var._from_op(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Var._from_op(self.value.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape):
        old = self.shape
        return Var._from_op(
            self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),)
        )

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable
        leaf that requires a gradient."""
        order = _topological(self)
        grads = {id(self): np.ones_like(self.value) if seed is None else seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def gradients(loss, params):
    """Reverse-accumulate ``loss`` and return ``{name: d loss / d param}``.

    Parameters the loss does not depend on get a zero array.
    """
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }


def _unary(x, value, dfdx):
    x = as_var(x)
    return Var._from_op(value, (x,), lambda g: (g * dfdx(),))


def exp(x):
    x = as_var(x)
    out = np.exp(x.value)
    return _unary(x, out, lambda: out)


def log(x):
    x = as_var(x)
    return _unary(x, np.log(x.value), lambda: 1.0 / x.value)


def log1p(x):
    x = as_var(x)
    return _unary(x, np.log1p(x.value), lambda: 1.0 / (1.0 + x.value))


def tanh(x):
    x = as_var(x)
    out = np.tanh(x.value)
    return _unary(x, out, lambda: 1.0 - out * out)


def _logistic(v):
    # e^v / (1 + e^v) from e^-|v|, accurate to full relative precision for
    # large negative v, where 1 + tanh(v / 2) would cancel
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_var(x)
    out = _logistic(x.value)
    return _unary(x, out, lambda: out * (1.0 - out))


def softplus(x):
    x = as_var(x)
    return _unary(x, special._softplus_unchecked(x.value), lambda: _logistic(x.value))


def digamma(x):
    x = as_var(x)
    return _unary(
        x,
        special._digamma_unchecked(x.value),
        lambda: special._trigamma_unchecked(x.value),
    )


def log_gamma(x):
    x = as_var(x)
    return _unary(
        x,
        special._log_gamma_unchecked(x.value),
        lambda: special._digamma_unchecked(x.value),
    )


def clip(x, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero outside the open interval."""
    x = as_var(x)
    inside = (x.value > lo) & (x.value < hi)
    return _unary(x, np.clip(x.value, lo, hi), lambda: inside.astype(np.float64))


def relu(x):
    """max(x, 0) with zero gradient at and below zero."""
    x = as_var(x)
    pos = x.value > 0.0
    return _unary(x, np.where(pos, x.value, 0.0), lambda: pos.astype(np.float64))


def where(cond, a, b):
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    return Var._from_op(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (
            _grad_for(a, np.where(cond, g, 0.0)),
            _grad_for(b, np.where(cond, 0.0, g)),
        ),
    )


def logsumexp(x, axis=-1):
    x = as_var(x)
    m = np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return Var._from_op(
        out, (x,), lambda g: (np.expand_dims(g, axis) * soft,)
    )


def take(x, cols):
    """Select columns ``cols`` of a 2-d array."""
    x = as_var(x)
    cols = np.asarray(cols)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, cols] = g
        return (full,)

    return Var._from_op(x.value[:, cols], (x,), back)


def take_rows(x, rows):
    """Select rows ``rows`` (no repeats) of a 2-d array."""
    x = as_var(x)
    rows = np.asarray(rows)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows] = g
        return (full,)

    return Var._from_op(x.value[rows], (x,), back)


def assemble(parts, cols, width):
    """Inverse of ``take``: place each 2-d part at its column indices."""
    parts = tuple(as_var(p) for p in parts)
    cols = [np.asarray(c) for c in cols]
    out = np.empty((parts[0].shape[0], width), dtype=np.result_type(*(p.value for p in parts)))
    for p, c in zip(parts, cols):
        out[:, c] = p.value
    return Var._from_op(out, parts, lambda g: tuple(g[:, c] for c in cols))


def scatter(v, index, shape):
    """Dense array of ``shape`` holding ``v`` at ``index`` and zeros elsewhere."""
    v = as_var(v)
    out = np.zeros(shape, dtype=v.value.dtype)
    out[index] = v.value
    return Var._from_op(out, (v,), lambda g: (g[index],))


def tanh_mlp(x, w1, b1, w2, b2):
    """tanh(x @ w1 + b1) @ w2 + b2 as one node.

    Fusing the layer keeps a single hidden activation alive and skips the
    gradients of inputs that do not need one, which dominates training time.
    """
    x, w1, b1, w2, b2 = (as_var(v) for v in (x, w1, b1, w2, b2))
    h = x.value @ w1.value
    h += b1.value
    np.tanh(h, out=h)
    out = h @ w2.value
    out += b2.value

    def back(g):
        # Transposes are copied so BLAS sees contiguous operands, and h is
        # overwritten with tanh' once its own use is done: a node is only
        # ever back-propagated once.
        ones = np.ones(g.shape[0])
        gw2 = h.T @ g if w2.requires_grad else None
        gh = g @ np.ascontiguousarray(w2.value.T)
        np.multiply(h, h, out=h)
        np.subtract(1.0, h, out=h)
        gh *= h
        return (
            gh @ np.ascontiguousarray(w1.value.T) if x.requires_grad else None,
            x.value.T @ gh if w1.requires_grad else None,
            ones @ gh if b1.requires_grad else None,
            gw2,
            ones @ g if b2.requires_grad else None,
        )

    return Var._from_op(out, (x, w1, b1, w2, b2), back)
