"""Time-dependent vector fields on R^N and their Gaussian calculus.

Callbacks work on batches: ``value(t, X)`` maps an ``(M, N)`` array to
``(M, N)``; ``jacobian(t, X)`` returns ``(M, N, N)`` with
``J[m, i, j] = d b^i / d x_j``; the two divergences return ``(M,)``.
Missing derivatives fall back to central finite differences.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import expm

from .errors import ConfigurationError, check_finite
from .gaussian import QuadratureScheme, default_inner_quadrature, expectation
from .ou import _shift_and_integrate

_FD_BASE = np.finfo(float).eps ** (1.0 / 3.0)


def _batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def conjugate_exponent(p):
    return math.inf if p == 1 else p / (p - 1.0)


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """A vector field ``b_t(x)`` on ``[0, horizon] x R^dim``.

    ``p`` and ``q`` are the integrability exponents of the field and of its
    symmetric gradient / Gaussian divergence; ``r = max(p', q')``.
    """

    dim: int
    value: Callable
    horizon: float = 1.0
    jacobian: Optional[Callable] = None
    divergence: Optional[Callable] = None
    gaussian_divergence: Optional[Callable] = None
    p: float = 2.0
    q: float = 2.0
    fd_step: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.horizon <= 0:
            raise ConfigurationError("horizon must be > 0")
        if not self.p > 1:
            raise ConfigurationError(f"p must be > 1 (got {self.p})")
        if not 1 < self.q <= 2:
            raise ConfigurationError(f"q must lie in (1, 2] (got {self.q})")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ConfigurationError("fd_step must be > 0")

    @property
    def r(self):
        return max(conjugate_exponent(self.p), conjugate_exponent(self.q))

    def __call__(self, t, x):
        xb, single = _batch(x)
        out = np.asarray(self.value(t, xb), dtype=float)
        return out[0] if single else out

    def snapshot(self, t=0.0):
        """The map ``x -> b_t(x)`` on batches."""
        return lambda x: np.asarray(self.value(t, x), dtype=float)

    def jac(self, t, X):
        """Jacobian on a batch, analytic if available, else central differences."""
        if self.jacobian is not None:
            return np.asarray(self.jacobian(t, X), dtype=float)
        return fd_jacobian(self.snapshot(t), X, self.fd_step)

    def div(self, t, X):
        if self.divergence is not None:
            return np.asarray(self.divergence(t, X), dtype=float)
        return np.trace(self.jac(t, X), axis1=1, axis2=2)

    def div_gamma(self, t, X, values=None):
        if self.gaussian_divergence is not None:
            return np.asarray(self.gaussian_divergence(t, X), dtype=float)
        if values is None:
            values = np.asarray(self.value(t, X), dtype=float)
        return self.div(t, X) - np.einsum("mi,mi->m", values, X)

    def with_exponents(self, p=None, q=None):
        return replace(self, p=self.p if p is None else p, q=self.q if q is None else q)


def fd_jacobian(fn, X, step=None):
    """Central-difference Jacobian of a batch map ``fn: (M, N) -> (M, N)``."""
    X = np.asarray(X, dtype=float)
    m, n = X.shape
    if step is None:
        h = _FD_BASE * np.maximum(1.0, np.linalg.norm(X, axis=1))
    else:
        h = np.full(m, float(step))
    J = np.empty((m, n, n))
    for j in range(n):
        dx = np.zeros_like(X)
        dx[:, j] = h
        J[:, :, j] = (np.asarray(fn(X + dx)) - np.asarray(fn(X - dx))) / (2.0 * h[:, None])
    return J


def gaussian_divergence(f, t, x):
    """``div_gamma b_t(x) = div b_t(x) - <b_t(x), x>``."""
    xb, single = _batch(x)
    out = f.div_gamma(t, xb)
    return float(out[0]) if single else out


def symmetric_gradient(f, t, x):
    """Symmetric part ``(J + J^T) / 2`` of the Jacobian (exactly symmetric)."""
    xb, single = _batch(x)
    J = f.jac(t, xb)
    S = 0.5 * (J + np.swapaxes(J, 1, 2))
    return S[0] if single else S


def hs_norm(M):
    """Hilbert-Schmidt (Frobenius) norm over the last two axes."""
    M = np.asarray(M, dtype=float)
    out = np.sqrt(np.sum(M * M, axis=(-2, -1)))
    return float(out) if out.ndim == 0 else out


def ld_seminorm(f, q, quad, time_nodes):
    """``int_0^T (E |(grad b_t)^sym|_HS^q)^(1/q) dt`` (trapezoid in time)."""
    if not 1 < q <= 2:
        raise ConfigurationError("q must lie in (1, 2]")
    time_nodes = np.asarray(time_nodes, dtype=float)
    vals = [
        expectation(lambda x, t=t: hs_norm(symmetric_gradient(f, t, x)) ** q, quad) ** (1.0 / q)
        for t in time_nodes
    ]
    if len(time_nodes) == 1:
        return float(vals[0])
    return float(trapezoid(vals, time_nodes))


def cylindrical_projection(f, m, quad_tail):
    """Conditional expectation of the first ``m`` components given ``x_1..x_m``.

    Trailing coordinates are integrated out with ``quad_tail`` (dimension
    ``f.dim - m``).
    """
    n = f.dim
    if not 1 <= m < n:
        raise ConfigurationError(f"need 1 <= m < {n}")
    if quad_tail.dim != n - m:
        raise ConfigurationError("tail quadrature has the wrong dimension")
    tail = quad_tail.nodes
    w = quad_tail.weights
    k = tail.shape[0]

    def lift(X):
        X = np.asarray(X, dtype=float)
        rows = X.shape[0]
        full = np.empty((rows, k, n))
        full[:, :, :m] = X[:, None, :]
        full[:, :, m:] = tail[None, :, :]
        return full.reshape(-1, n), rows

    def value(t, X):
        pts, rows = lift(X)
        vals = check_finite(np.asarray(f.value(t, pts))[:, :m], pts)
        return np.einsum("rki,k->ri", vals.reshape(rows, k, m), w)

    def jacobian(t, X):
        pts, rows = lift(X)
        J = f.jac(t, pts)[:, :m, :m]
        return np.einsum("rkij,k->rij", J.reshape(rows, k, m, m), w)

    return FieldSpec(m, value, horizon=f.horizon, jacobian=jacobian, p=f.p, q=f.q,
                     name=f"{f.name}|E_{m}")


def smooth_field(f, eps, quad=None):
    """Componentwise OU smoothing ``b_eps^i = T_eps b^i``.

    The derivative callbacks use ``grad T_eps = e^-eps T_eps grad``, which on
    the quadrature-smoothed field ``sum_k w_k b(e^-eps x + s y_k)`` holds
    exactly.  The Gaussian divergence is then ``div - <b_eps, x>`` of that same
    field, so density transport stays consistent with the integrated ODE; it
    agrees with ``e^eps T_eps(div_gamma b)`` up to quadrature error.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be > 0")
    if quad is None:
        quad = default_inner_quadrature(f.dim)
    damp = math.exp(-eps)

    def value(t, X):
        return _shift_and_integrate(lambda z: f.value(t, z), eps, X, quad)

    def jacobian(t, X):
        n = f.dim
        flat = _shift_and_integrate(lambda z: f.jac(t, z).reshape(-1, n * n), eps, X, quad)
        return damp * flat.reshape(-1, n, n)

    def divergence(t, X):
        return damp * _shift_and_integrate(lambda z: f.div(t, z), eps, X, quad)

    return FieldSpec(f.dim, value, horizon=f.horizon, jacobian=jacobian,
                     divergence=divergence, p=f.p, q=f.q, name=f"T_{eps:g}({f.name})")


@dataclass(frozen=True, eq=False)
class RotationGroup:
    """Orthogonal group ``Q_t = exp(t L)`` generated by a skew-symmetric ``L``."""

    generator: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.generator, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ConfigurationError("generator must be square")
        if not np.allclose(L, -L.T, atol=1e-12, rtol=0):
            raise ConfigurationError("generator must be skew-symmetric")
        object.__setattr__(self, "generator", L)

    @property
    def dim(self):
        return self.generator.shape[0]

    def __call__(self, t):
        if t == 0:
            return np.eye(self.dim)
        return expm(t * self.generator)

    @classmethod
    def planar(cls, dim, omega=1.0):
        L = np.zeros((dim, dim))
        L[0, 1], L[1, 0] = -omega, omega
        return cls(L)


def rotate_field(f, G):
    """``c_t(x) = Q_{-t} b_t(Q_t x)``, the field driving ``Y = Q_{-t} X``."""
    if G.dim != f.dim:
        raise ConfigurationError("rotation group and field dimensions differ")

    def value(t, X):
        Q = G(t)
        Y = np.einsum("ij,mj->mi", Q, X)
        return np.einsum("ji,mj->mi", Q, np.asarray(f.value(t, Y)))

    def jacobian(t, X):
        Q = G(t)
        Y = np.einsum("ij,mj->mi", Q, X)
        return np.einsum("ki,mkl,lj->mij", Q, f.jac(t, Y), Q)

    def divergence(t, X):
        return f.div(t, np.einsum("ij,mj->mi", G(t), X))

    def gdiv(t, X):
        return f.div_gamma(t, np.einsum("ij,mj->mi", G(t), X))

    return FieldSpec(f.dim, value, horizon=f.horizon, jacobian=jacobian,
                     divergence=divergence, gaussian_divergence=gdiv,
                     p=f.p, q=f.q, name=f"rot({f.name})")


def jacobian_consistency(f, t, probes):
    """Max abs difference between the analytic and finite-difference Jacobians."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if f.jacobian is None:
        return 0.0
    return float(np.max(np.abs(f.jac(t, probes) - fd_jacobian(f.snapshot(t), probes, f.fd_step))))
