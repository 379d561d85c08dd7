"""Weak continuity equation and renormalization residuals along computed flows.

Densities are never estimated from samples: they come from the log-density
carried along a forward flow, or from the time-reversed ODE integrated back
to time 0.
"""

import csv
import math
import warnings
from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .fields import FieldSpec
from .flow import IntegratorOptions, fmt, integrate_flow

DEFAULT_BACKWARD = IntegratorOptions(max_step=1e-2)


@dataclass(frozen=True)
class TestFunction:
    """Polynomial of degree <= 4 in the first ``m`` coordinates, optionally mollified.

    ``coefficients`` maps exponent tuples (length ``m``) to coefficients.  With
    ``mollifier_radius = R`` the polynomial is multiplied by
    ``exp(-|x_{1..m}|^2 / (2 R^2))``, which keeps it bounded with bounded gradient.
    """

    __test__ = False  # not a pytest class

    coefficients: dict
    mollifier_radius: Optional[float] = None

    def __post_init__(self):
        lens = {len(k) for k in self.coefficients}
        if len(lens) != 1:
            raise ConfigurationError("exponent tuples must share one length")
        if any(sum(k) > 4 or min(k) < 0 for k in self.coefficients):
            raise ConfigurationError("test functions have degree <= 4")
        if self.mollifier_radius is not None and self.mollifier_radius <= 0:
            raise ConfigurationError("mollifier radius must be > 0")

    @property
    def m(self):
        return len(next(iter(self.coefficients)))

    @classmethod
    def monomial(cls, exponents, coefficient=1.0, mollifier_radius=None):
        return cls({tuple(exponents): float(coefficient)}, mollifier_radius)

    def _poly(self, X):
        Xm = X[:, :self.m]
        val = np.zeros(X.shape[0])
        grad = np.zeros((X.shape[0], self.m))
        for exps, c in self.coefficients.items():
            terms = np.stack([Xm[:, i] ** e for i, e in enumerate(exps)], axis=1)
            val += c * np.prod(terms, axis=1)
            for i, e in enumerate(exps):
                if e == 0:
                    continue
                dterm = terms.copy()
                dterm[:, i] = e * Xm[:, i] ** (e - 1)
                grad[:, i] += c * np.prod(dterm, axis=1)
        return val, grad

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val, _ = self._poly(X)
        if self.mollifier_radius is not None:
            val = val * self._bump(X)
        return val

    def _bump(self, X):
        R = self.mollifier_radius
        return np.exp(-np.sum(X[:, :self.m] ** 2, axis=1) / (2 * R * R))

    def gradient(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val, grad = self._poly(X)
        if self.mollifier_radius is not None:
            g = self._bump(X)
            R2 = self.mollifier_radius ** 2
            grad = g[:, None] * (grad - val[:, None] * X[:, :self.m] / R2)
        out = np.zeros_like(X)
        out[:, :self.m] = grad
        return out


def cubic_test_functions(m=2):
    """All monomials of degree <= 3 in ``m`` variables."""
    return [TestFunction.monomial(e) for e in product(range(4), repeat=m) if sum(e) <= 3]


@dataclass(frozen=True)
class RenormalizationProfile:
    """Renormalizing function ``beta``.

    ``identity``: ``beta(z) = z``; ``sqrt``: ``sqrt(1+z^2) - 1``;
    ``arctan``: ``arctan z``; ``beta_eps``: the C^1 approximation of the
    positive part, ``sqrt(z^2 + eps^2) - eps`` for ``z >= 0`` and 0 below.
    """

    kind: str = "sqrt"
    eps: float = 0.1

    def __post_init__(self):
        if self.kind not in ("identity", "sqrt", "arctan", "beta_eps"):
            raise ConfigurationError(f"unknown profile {self.kind!r}")
        if self.kind == "beta_eps" and self.eps <= 0:
            raise ConfigurationError("eps must be > 0")

    def beta(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return z.copy()
        if self.kind == "sqrt":
            return np.sqrt(1.0 + z * z) - 1.0
        if self.kind == "arctan":
            return np.arctan(z)
        zp = np.maximum(z, 0.0)
        return np.where(z > 0, np.sqrt(zp * zp + self.eps ** 2) - self.eps, 0.0)

    def dbeta(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "sqrt":
            return z / np.sqrt(1.0 + z * z)
        if self.kind == "arctan":
            return 1.0 / (1.0 + z * z)
        zp = np.maximum(z, 0.0)
        return np.where(z > 0, zp / np.sqrt(zp * zp + self.eps ** 2), 0.0)

    def defect(self, z):
        """``beta(z) - z beta'(z)``, in cancellation-free closed form."""
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return np.zeros_like(z)
        if self.kind == "arctan":
            return self.beta(z) - z * self.dbeta(z)
        # sqrt / beta_eps with scale e: -e z^2 / (h (h + e)), h = hypot(z, e)
        e = 1.0 if self.kind == "sqrt" else self.eps
        zz = z if self.kind == "sqrt" else np.maximum(z, 0.0)
        h = np.hypot(zz, e)
        with np.errstate(invalid="ignore"):
            out = -e * (zz / h) * (zz / (h + e))
        return np.where(np.isinf(zz), -e, out)


def _reversed_field(f, t):
    def value(tau, X):
        return -np.asarray(f.value(t - tau, X), dtype=float)

    def jacobian(tau, X):
        return -f.jac(t - tau, X)

    def divergence(tau, X):
        return -f.div(t - tau, X)

    def gdiv(tau, X):
        return -f.div_gamma(t - tau, X)

    return FieldSpec(f.dim, value, horizon=t, jacobian=jacobian, divergence=divergence,
                     gaussian_divergence=gdiv, p=f.p, q=f.q, name=f"rev({f.name})")


def backward_preimage(f, t, y, options=None):
    """``(x, u_t(y), alive)`` with ``X(t, x) = y`` recovered by the reversed ODE.

    Along the reversed path ``Z(tau) = X(t - tau, x)`` the accumulated
    ``int div_gamma b`` equals the forward integral, so
    ``u_t(y) = exp(-int_0^t div_gamma b_s(X(s, x)) ds)``.
    """
    options = options or DEFAULT_BACKWARD
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if t < 0:
        raise DomainError("t must be >= 0")
    if t == 0:
        return y.copy(), np.ones(y.shape[0]), np.ones(y.shape[0], dtype=bool)
    batch = integrate_flow(_reversed_field(f, t), y, [0.0, t], options)
    # log_density of the reversed flow is +int div_gamma b along the forward path
    dens = np.where(batch.alive, np.exp(-batch.log_density[:, -1]), 0.0)
    return batch.final(), dens, batch.alive.copy()


def backward_density(f, t, y, options=None, return_alive=False):
    """Density ``u_t(y)`` of ``X(t, .)_# gamma`` w.r.t. ``gamma``; 0 where the path blew up."""
    y = np.asarray(y, dtype=float)
    _, dens, alive = backward_preimage(f, t, y, options)
    if y.ndim == 1:
        return (float(dens[0]), bool(alive[0])) if return_alive else float(dens[0])
    return (dens, alive) if return_alive else dens


def weak_residual(f, batch, phi, t_index, source=None):
    """``|d/dt E phi(X_t) - E <b_t(X_t), grad phi(X_t)>|`` at one grid node.

    The time derivative is a central difference; at the grid ends a one-sided
    difference is used and a warning is issued.  ``source(t, X)``, if given,
    is subtracted from the left-hand side.
    """
    grid = batch.time_grid
    m = grid.size
    if m < 2:
        raise ConfigurationError("need at least two time nodes")
    i = t_index % m
    alive = batch.alive
    if not alive.any():
        raise DomainError("no particle alive")
    P = batch.positions[alive]
    if 0 < i < m - 1:
        lo, hi = i - 1, i + 1
    else:
        warnings.warn("one-sided time difference at grid boundary", RuntimeWarning, stacklevel=2)
        lo, hi = (0, 1) if i == 0 else (m - 2, m - 1)
    dmean = (np.mean(phi(P[:, hi])) - np.mean(phi(P[:, lo]))) / (grid[hi] - grid[lo])
    t = grid[i]
    X = P[:, i]
    transport = np.mean(np.einsum("mi,mi->m", f.value(t, X), phi.gradient(X)))
    lhs = dmean
    if source is not None:
        lhs -= np.mean(np.asarray(source(t, X)) * phi(X))
    return float(abs(lhs - transport))


@dataclass(frozen=True)
class ResidualTable:
    t: tuple
    lhs: tuple
    rhs: tuple
    residual: tuple
    std_error: tuple
    envelope: Optional[tuple] = None   # eps E[div_gamma b]^- for beta_eps profiles
    dead_fraction: float = 0.0

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "lhs", "rhs", "residual", "std_error"])
            for row in zip(self.t, self.lhs, self.rhs, self.residual, self.std_error):
                w.writerow([fmt(v) for v in row])

    @property
    def max_residual(self):
        return max(self.residual) if self.residual else 0.0


def _weighted(values, quad):
    mean = float(np.sum(values * quad.weights))
    if quad.is_monte_carlo and values.size > 1:
        return mean, float(np.std(values, ddof=1) / math.sqrt(values.size))
    return mean, 0.0


def _node_densities_backward(f, grid, quad, options):
    y = quad.nodes
    for t in grid:
        u, alive = backward_density(f, t, y, options, return_alive=True)
        yield t, y, u, alive, np.ones_like(u)


def _node_densities_pullback(f, grid, quad, options):
    batch = integrate_flow(f, quad.nodes, grid, options or DEFAULT_BACKWARD)
    for i, t in enumerate(grid):
        u = np.exp(batch.log_density[:, i])
        # int g(y) d gamma(y) = int (g / u)(X(t, x)) d gamma(x) when g(u = 0) = 0
        yield t, batch.positions[:, i], u, batch.alive, 1.0 / u


def renormalization_residual(f, beta, time_grid, quad, options=None, source=None,
                             method="pullback"):
    """Both sides of ``d/dt int beta(u_t) = int [beta(u) - u beta'(u)] div_gamma b_t``.

    ``method="backward"`` evaluates ``u_t`` on the nodes of ``quad`` by
    reversed-ODE integration.  ``method="pullback"`` (default) integrates in
    the initial variable instead, ``int g(u_t) d gamma = int (g(u)/u)(X(t, x))
    d gamma(x)``, valid because every profile has ``beta(0) = 0``; it stays
    accurate when the flow concentrates the density below the node spacing.
    The left side is a central difference on interior time nodes.  Dead paths
    are dropped and reported through ``dead_fraction``.
    """
    grid = np.asarray(time_grid, dtype=float)
    if grid.size < 3:
        raise ConfigurationError("need at least three time nodes")
    if method == "backward":
        nodes = _node_densities_backward(f, grid, quad, options)
    elif method == "pullback":
        if float(beta.beta(np.zeros(1))[0]) != 0.0:
            raise ConfigurationError("pullback needs beta(0) = 0")
        nodes = _node_densities_pullback(f, grid, quad, options)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    integrals, rhs, se, env, dead = [], [], [], [], 0.0
    for t, pts, u, alive, jac in nodes:
        dead = max(dead, float(np.sum(quad.weights[~alive])))
        with np.errstate(all="ignore"):
            bu = np.where(alive, beta.beta(u) * jac, 0.0)
            dg = f.div_gamma(t, pts)
            integrand = np.where(alive, beta.defect(u) * dg * jac, 0.0)
            if source is not None:
                integrand = integrand + np.where(
                    alive, np.asarray(source(t, pts)) * beta.dbeta(u) * jac, 0.0)
        integrals.append(_weighted(bu, quad)[0])
        val, err = _weighted(integrand, quad)
        rhs.append(val)
        se.append(err)
        if beta.kind == "beta_eps":
            neg = np.where(alive, np.maximum(0.0, -dg) * jac, 0.0)
            env.append(beta.eps * float(np.sum(neg * quad.weights)))
    if dead > 0:
        warnings.warn(f"lost {dead:.3g} of the mass to dead paths", RuntimeWarning, stacklevel=2)
    ts, lhs, rr, res, ss, ee = [], [], [], [], [], []
    for i in range(1, grid.size - 1):
        d = (integrals[i + 1] - integrals[i - 1]) / (grid[i + 1] - grid[i - 1])
        ts.append(float(grid[i]))
        lhs.append(d)
        rr.append(rhs[i])
        res.append(abs(d - rhs[i]))
        ss.append(se[i])
        if env:
            ee.append(env[i])
    return ResidualTable(tuple(ts), tuple(lhs), tuple(rr), tuple(res), tuple(ss),
                         tuple(ee) if env else None, dead)


def sign_preservation_probe(f, u0, time_grid, quad, options=None):
    """``max_t int max(0, u_t) d gamma`` for the transported signed density.

    ``u_t(y) = u0(X^-1(t, y)) * (density of X(t, .)_# gamma at y)``.
    """
    worst = 0.0
    for t in np.asarray(time_grid, dtype=float):
        x, dens, alive = backward_preimage(f, t, quad.nodes, options)
        ut = np.where(alive, np.asarray(u0(x), dtype=float) * dens, 0.0)
        worst = max(worst, float(np.sum(np.maximum(ut, 0.0) * quad.weights)))
    return worst
