"""Small reverse-mode automatic differentiation engine on numpy arrays.

Define-by-run: every operation returns a :class:`Tensor` that remembers its
parents together with a vector-Jacobian closure.  The closures are written in
terms of the same primitives, so the backward pass itself builds a
differentiable graph -- calling :func:`grad` on an expression that already
contains a :func:`grad` (one nesting level, or more) just works.  This is
what lets an outer objective differentiate through an inner gradient-descent
step.

The primitive set is deliberately small: affine maps, elementwise functions,
reductions, symmetric-positive-definite solves, log-determinants, and the
log-gamma family.  Shapes up to 2-d with numpy broadcasting are supported.
Everything is float64 and deterministic: the backward pass walks nodes in
reverse creation order, so repeated runs are bitwise identical.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln as _gammaln_np
from scipy.special import polygamma as _polygamma_np

_counter = itertools.count()


class Tensor:
    """A numpy value plus backpointers for reverse-mode differentiation."""

    __slots__ = ("value", "parents", "oid")

    def __init__(self, value, parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Tensor, vjp) pairs
        self.oid = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, leaf={not self.parents})"

    # operator sugar -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)


def constant(x) -> Tensor:
    """Wrap a value as a leaf with no gradient history."""
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Same value, no history.  Gradients do not flow through the result."""
    return Tensor(x.value)


# --------------------------------------------------------------------------
# broadcasting support
# --------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    for _ in range(extra):
        g = sum_(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = sum_(g, axis=ax, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# --------------------------------------------------------------------------
# arithmetic primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(neg(g), b.shape)),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, ((a, lambda g: neg(g)),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(mul(g, b), a.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.shape)),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value / b.value,
        (
            (a, lambda g: _unbroadcast(div(g, b), a.shape)),
            (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)),
        ),
    )


def power(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    return Tensor(
        a.value**p,
        ((a, lambda g: mul(g, mul(constant(p), power(a, p - 1.0)))),),
    )


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.value))
    out.parents = ((a, lambda g: div(g, mul(constant(2.0), out))),)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.value))
    out.parents = ((a, lambda g: mul(g, out)),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), ((a, lambda g: div(g, a)),))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log1p(a.value), ((a, lambda g: div(g, add(a, constant(1.0)))),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.value))
    out.parents = ((a, lambda g: mul(g, sub(constant(1.0), mul(out, out)))),)
    return out


# --------------------------------------------------------------------------
# shape and reduction primitives
# --------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor(a.value.reshape(shape), ((a, lambda g: reshape(g, old)),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.T, ((a, lambda g: transpose(g)),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_val = np.sum(a.value, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g: Tensor) -> Tensor:
        if axis is None:
            return mul(g, constant(np.ones(shape)))
        gg = g
        if not keepdims:
            kd = list(out_val.shape)
            kd.insert(axis if axis >= 0 else axis + len(shape), 1)
            gg = reshape(gg, tuple(kd))
        return mul(gg, constant(np.ones(shape)))

    return Tensor(out_val, ((a, vjp),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), constant(float(n)))


# --------------------------------------------------------------------------
# linear algebra primitives
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix/vector product for 1-d and 2-d operands."""
    a, b = as_tensor(a), as_tensor(b)
    na, nb = a.ndim, b.ndim
    if na == 2 and nb == 2:
        parents = (
            (a, lambda g: matmul(g, transpose(b))),
            (b, lambda g: matmul(transpose(a), g)),
        )
    elif na == 2 and nb == 1:
        parents = (
            (a, lambda g: outer(g, b)),
            (b, lambda g: matmul(transpose(a), g)),
        )
    elif na == 1 and nb == 2:
        parents = (
            (a, lambda g: matmul(b, g)),
            (b, lambda g: outer(a, g)),
        )
    elif na == 1 and nb == 1:
        parents = (
            (a, lambda g: mul(g, b)),
            (b, lambda g: mul(g, a)),
        )
    else:
        raise ValueError(f"matmul supports 1-d/2-d operands, got ndim {na} and {nb}")
    return Tensor(a.value @ b.value, parents)


def dot(a, b) -> Tensor:
    return matmul(a, b)


def outer(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return matmul(reshape(a, (a.value.size, 1)), reshape(b, (1, b.value.size)))


def solve_spd(a, b) -> Tensor:
    """Solve ``a x = b`` for symmetric positive-definite ``a`` via Cholesky.

    ``b`` may be a vector or a matrix of stacked right-hand sides.  The
    adjoint rules (for symmetric ``a``) are

        b_bar = a^{-1} g,    a_bar = -(a^{-1} g) x^T,

    both expressed through :func:`solve_spd` itself so they remain
    differentiable.
    """
    a, b = as_tensor(a), as_tensor(b)
    factor = cho_factor(a.value, lower=True)
    x_val = cho_solve(factor, b.value)
    out = Tensor(x_val)

    def vjp_a(g: Tensor) -> Tensor:
        w = solve_spd(a, g)
        if out.ndim == 1:
            return neg(outer(w, out))
        return neg(matmul(w, transpose(out)))

    out.parents = ((a, vjp_a), (b, lambda g: solve_spd(a, g)))
    return out


def logdet_spd(a) -> Tensor:
    """Log-determinant of a symmetric positive-definite matrix."""
    a = as_tensor(a)
    chol = np.linalg.cholesky(a.value)
    val = 2.0 * np.sum(np.log(np.diag(chol)))
    eye = np.eye(a.shape[0])
    return Tensor(val, ((a, lambda g: mul(g, transpose(solve_spd(a, constant(eye))))),))


# --------------------------------------------------------------------------
# log-gamma family
# --------------------------------------------------------------------------

def _polygamma_tensor(k: int, a: Tensor) -> Tensor:
    out = Tensor(_polygamma_np(k, a.value))
    out.parents = ((a, lambda g: mul(g, _polygamma_tensor(k + 1, a))),)
    return out


def gammaln(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(_gammaln_np(a.value), ((a, lambda g: mul(g, digamma(a))),))


def digamma(a) -> Tensor:
    a = as_tensor(a)
    return _polygamma_tensor(0, a)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.oid in seen:
            continue
        seen.add(node.oid)
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.oid not in seen:
                stack.append((parent, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Adjoints of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients keep their history and can be
    differentiated again; otherwise they are detached leaves.  Tensors in
    ``wrt`` that the output does not depend on get zero adjoints.
    """
    if output.value.ndim != 0:
        raise ValueError(f"grad expects a scalar output, got shape {output.shape}")

    adjoints: dict[int, Tensor] = {output.oid: constant(1.0)}
    for node in reversed(_toposort(output)):
        g = adjoints.get(node.oid)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = adjoints.get(parent.oid)
            adjoints[parent.oid] = contrib if prev is None else add(prev, contrib)

    out: list[Tensor] = []
    for leaf in wrt:
        g = adjoints.get(leaf.oid)
        if g is None:
            g = constant(np.zeros(leaf.shape))
        if not create_graph:
            g = detach(g)
        if not np.isfinite(g.value).all():
            raise FloatingPointError("non-finite gradient encountered")
        out.append(g)
    return out


def value_and_grad(
    fn: Callable[..., Tensor], args: Sequence[Tensor], create_graph: bool = False
) -> tuple[Tensor, list[Tensor]]:
    out = fn(*args)
    return out, grad(out, args, create_graph=create_graph)
