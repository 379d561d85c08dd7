"""Ornstein-Uhlenbeck semigroup through Mehler's formula.

``T_t u(x) = E_y u(e^-t x + sqrt(1 - e^-2t) y)`` with ``y`` standard normal.
The ``y`` integral is carried out by an inner :class:`QuadratureScheme`.
Points are passed as ``(N,)`` vectors or ``(M, N)`` batches; results follow
the same convention (scalar / ``(M,)`` for scalar integrands).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, check_finite
from .gaussian import QuadratureScheme, default_inner_quadrature, expectation
from .parallel import chunked_map

MIN_GRADIENT_TIME = 1e-6


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x, x.ndim == 1


def _shift_and_integrate(fn, t, x, quad, kernel=None):
    """``E_y[fn(e^-t x + s y) * kernel(y)]`` for a batch of ``x``.

    ``kernel`` (if given) is an array of per-node factors with shape
    ``(n,)`` or ``(n, k)``.  Returns an array with leading axis ``M``.
    """
    a = math.exp(-t)
    s = math.sqrt(-math.expm1(-2.0 * t))
    y = quad.nodes
    n, dim = y.shape

    def block(xb):
        pts = (a * xb[:, None, :] + s * y[None, :, :]).reshape(-1, dim)
        vals = check_finite(np.asarray(fn(pts), dtype=float), pts)
        vals = vals.reshape((xb.shape[0], n) + vals.shape[1:])
        w = quad.weights
        if kernel is not None:
            k = kernel
            if vals.ndim == 2 and k.ndim == 2:
                # scalar integrand against a vector kernel
                return np.einsum("mn,nk,n->mk", vals, k, w)
            if vals.ndim == 3 and k.ndim == 2:
                # vector integrand dotted with a vector kernel
                return np.einsum("mnk,nk,n->m", vals, k, w)
            if vals.ndim == 3 and k.ndim == 1:
                return np.einsum("mnk,n,n->mk", vals, k, w)
            return np.einsum("mn,n,n->m", vals, k, w)
        if vals.ndim == 2:
            return np.einsum("mn,n->m", vals, w)
        return np.einsum("mnk,n->mk", vals, w)

    return chunked_map(block, x, chunk_size=max(1, 2**21 // max(n, 1)))


@dataclass(frozen=True)
class OuOperator:
    """``T_t`` at a fixed time with the rule used for the inner ``y`` integral."""

    t: float
    inner_quad: QuadratureScheme

    def __post_init__(self):
        if self.t < 0:
            raise DomainError("semigroup time must be >= 0")

    @classmethod
    def default(cls, t, dim, seed=0):
        return cls(float(t), default_inner_quadrature(dim, seed))

    def __call__(self, u, x):
        return mehler_apply(u, self, x)


def mehler_apply(u, op, x):
    """Evaluate ``T_t u`` at ``x``."""
    xb, single = _as_batch(x)
    if op.t == 0.0:
        out = check_finite(np.asarray(u(xb), dtype=float), xb)
    else:
        out = _shift_and_integrate(u, op.t, xb, op.inner_quad)
    return out[0] if single else out


def mehler_gradient(u, op, x):
    """Gradient of ``T_t u`` at ``x`` without differentiating ``u``.

    ``e^-t E_y[u(e^-t x + s y) y / s]`` with ``s = sqrt(1 - e^-2t)``.
    """
    t = op.t
    if t < MIN_GRADIENT_TIME:
        raise DomainError(
            f"mehler_gradient needs t >= {MIN_GRADIENT_TIME} (got {t}); the 1/sqrt(1-e^-2t) "
            "factor would amplify quadrature noise"
        )
    xb, single = _as_batch(x)
    s = math.sqrt(-math.expm1(-2.0 * t))
    kernel = op.inner_quad.nodes / s
    out = math.exp(-t) * _shift_and_integrate(u, t, xb, op.inner_quad, kernel)
    return out[0] if single else out


def smoothed_divergence(v, c, eps, x, quad=None):
    """``T_eps(div_gamma(v c))`` at ``x`` with no derivative of ``v`` or ``c``.

    ``c`` is a field snapshot mapping ``(n, N)`` points to ``(n, N)`` vectors.
    Computed as ``E_y[(v c)(z) . y / s] - T_eps(z . (v c)(z))`` with
    ``z = e^-eps x + s y``.
    """
    if eps <= 0:
        raise DomainError("eps must be > 0")
    xb, single = _as_batch(x)
    if quad is None:
        quad = default_inner_quadrature(xb.shape[1])
    s = math.sqrt(-math.expm1(-2.0 * eps))

    def vc(z):
        return np.asarray(v(z), dtype=float)[:, None] * np.asarray(c(z), dtype=float)

    def dot_term(z):
        return np.einsum("nk,nk->n", z, vc(z))

    first = _shift_and_integrate(vc, eps, xb, quad, quad.nodes / s)
    second = _shift_and_integrate(dot_term, eps, xb, quad)
    out = first - second
    return out[0] if single else out


def self_adjoint_check(u, v, t, quad_outer, op=None):
    """``(E[v T_t u], E[u T_t v])`` with the outer integral over ``quad_outer``."""
    if op is None:
        op = OuOperator.default(t, quad_outer.dim)
    elif op.t != t:
        op = OuOperator(t, op.inner_quad)
    lhs = expectation(lambda x: v(x) * mehler_apply(u, op, x), quad_outer)
    rhs = expectation(lambda x: u(x) * mehler_apply(v, op, x), quad_outer)
    return lhs, rhs
