"""Commutator ``r^eps(v, c) = e^eps <c, grad T_eps v> - T_eps(div_gamma(v c))``.

``commutator_eval`` works from the two derivative-free Mehler
representations, so neither ``v`` nor ``c`` is ever differentiated.
``commutator_report`` certifies the L1 bound

    |r^eps|_1 <= |v|_r [ Lambda(p) eps / sqrt(1 - e^-2eps) |c|_p
                         + 2^(1/q') |div_gamma c|_q
                         + 2^(1/q') sqrt(2) | |(grad c)^sym|_HS |_q ]

and tracks ``-r^eps -> v div_gamma c`` in L1 as ``eps -> 0``.

The proof-side rescaling ``u^eps = e^-eps T_eps u`` only multiplies the
commutator by ``e^-eps``; it is not a separate definition here.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import ConfigurationError, DomainError
from .fields import FieldSpec, conjugate_exponent, hs_norm
from .flow import fmt
from .gaussian import (default_inner_quadrature, derive_seed, expectation, gaussian_samples,
                       lambda_moment, mc_mean)
from .ou import OuOperator, mehler_gradient, smoothed_divergence
from .parallel import chunked_map

DEFAULT_EPS_GRID = (1.0, 0.3, 0.1, 0.03, 0.01)
DEFAULT_OUTER_POINTS = 10_000


def _snapshot(c, t=0.0):
    return c.snapshot(t) if isinstance(c, FieldSpec) else c


def commutator_eval(v, c, eps, x, quad=None):
    """``r^eps(x)`` for scalar ``v`` and a field (or field snapshot) ``c``."""
    if eps <= 0:
        raise DomainError("eps must be > 0")
    cs = _snapshot(c)
    x = np.asarray(x, dtype=float)
    xb = x[None, :] if x.ndim == 1 else x
    if quad is None:
        quad = default_inner_quadrature(xb.shape[1])
    grad = mehler_gradient(v, OuOperator(eps, quad), xb)
    transport = math.exp(eps) * np.einsum("mi,mi->m", cs(xb), grad)
    out = transport - smoothed_divergence(v, cs, eps, xb, quad)
    return float(out[0]) if x.ndim == 1 else out


def smoothing_factor(eps):
    """``eps / sqrt(1 - e^-2eps)``."""
    return eps / math.sqrt(-math.expm1(-2.0 * eps))


@dataclass(frozen=True)
class CommutatorReport:
    eps_grid: tuple
    l1_norm: tuple
    l1_std_error: tuple
    moment_term: tuple
    div_term: tuple
    sym_term: tuple
    limit_residual: tuple
    limit_std_error: tuple
    p: float
    q: float
    r: float
    norms: dict

    @property
    def bound(self):
        return tuple(a + b + c for a, b, c in zip(self.moment_term, self.div_term, self.sym_term))

    @property
    def violations(self):
        """Indices where ``l1_norm > bound + 3 std_error``."""
        return [i for i, (l, s, b) in enumerate(zip(self.l1_norm, self.l1_std_error, self.bound))
                if l > b + 3.0 * s]

    def to_json(self):
        d = asdict(self)
        d["bound"] = list(self.bound)
        d["violations"] = self.violations
        return json.dumps(d, indent=2, sort_keys=True)

    def rows(self):
        header = ["eps", "l1_norm", "l1_std_error", "moment_term", "div_term", "sym_term",
                  "bound", "limit_residual", "limit_std_error"]
        body = [[fmt(e), fmt(l), fmt(s), fmt(a), fmt(b), fmt(c), fmt(bd), fmt(lr), fmt(ls)]
                for e, l, s, a, b, c, bd, lr, ls in zip(
                    self.eps_grid, self.l1_norm, self.l1_std_error, self.moment_term,
                    self.div_term, self.sym_term, self.bound, self.limit_residual,
                    self.limit_std_error)]
        return header, body

    def to_csv(self, path):
        header, body = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)


def commutator_report(v, c, p, q, eps_grid=DEFAULT_EPS_GRID, quad=None,
                      n_outer=DEFAULT_OUTER_POINTS, seed=0, inner_quad=None, t=0.0):
    """Fill a :class:`CommutatorReport` for ``v`` and the field ``c`` at time ``t``.

    Norms of ``c``, ``div_gamma c``, ``|(grad c)^sym|_HS`` and ``v`` use
    ``quad``; the L1 norms of ``r^eps`` use ``n_outer`` seeded Gaussian points.
    """
    if not p > 1:
        raise DomainError("p must be > 1")
    if not 1 < q <= 2:
        raise DomainError("q must lie in (1, 2]")
    dim = c.dim
    r = max(conjugate_exponent(p), conjugate_exponent(q))
    if quad is None:
        quad = default_inner_quadrature(dim, seed)
    if inner_quad is None:
        inner_quad = default_inner_quadrature(dim, derive_seed(seed, "inner"))
    cs = c.snapshot(t)

    def sym_hs(x):
        J = c.jac(t, x)
        return hs_norm(0.5 * (J + np.swapaxes(J, 1, 2)))

    norm_c = expectation(lambda x: np.linalg.norm(cs(x), axis=1) ** p, quad) ** (1 / p)
    norm_div = expectation(lambda x: np.abs(c.div_gamma(t, x)) ** q, quad) ** (1 / q)
    norm_sym = expectation(lambda x: sym_hs(x) ** q, quad) ** (1 / q)
    norm_v = expectation(lambda x: np.abs(v(x)) ** r, quad) ** (1 / r)
    lam = lambda_moment(p)
    two_q = 2.0 ** (1.0 / conjugate_exponent(q))

    outer = gaussian_samples(dim, n_outer, derive_seed(seed, "outer"))
    limit = np.asarray(v(outer), dtype=float) * c.div_gamma(t, outer)

    l1, l1se, mom, dv, sy, lim, limse = [], [], [], [], [], [], []
    for eps in eps_grid:
        vals = chunked_map(lambda xb: np.atleast_1d(commutator_eval(v, cs, eps, xb, inner_quad)),
                           outer)
        a, b = mc_mean(np.abs(vals))
        l1.append(a)
        l1se.append(b)
        mom.append(lam * smoothing_factor(eps) * norm_c * norm_v)
        dv.append(two_q * norm_div * norm_v)
        sy.append(two_q * math.sqrt(2.0) * norm_sym * norm_v)
        a, b = mc_mean(np.abs(vals + limit))
        lim.append(a)
        limse.append(b)
    norms = {"c_Lp": norm_c, "div_gamma_c_Lq": norm_div, "sym_grad_HS_Lq": norm_sym,
             "v_Lr": norm_v, "lambda_p": lam}
    return CommutatorReport(tuple(float(e) for e in eps_grid), tuple(l1), tuple(l1se),
                            tuple(mom), tuple(dv), tuple(sy), tuple(lim), tuple(limse),
                            float(p), float(q), float(r), norms)


def _split_integrands(v, c, eps, x, quad_y, t_nodes):
    """Per-node integrands ``alpha A`` and ``alpha B`` (shape ``(M, n)``) and ``alpha``.

    The [0, 1] interpolation integral is taken in ``s = sqrt(1 - e^-2te)``,
    which removes the ``1/sqrt`` endpoint singularity: with
    ``a = sqrt(1 - s^2)``, ``z = a x + s y`` and ``w = s x - a y``,

        A = (1/eps) int_0^s1 [ w^T grad c(z) w - c(z).z ] ds
        B = (1/eps) int_0^s1 (s / a) c(z).w ds.
    """
    s1 = math.sqrt(-math.expm1(-2.0 * eps))
    g, gw = leggauss(int(t_nodes))
    s_nodes = 0.5 * s1 * (g + 1.0)
    s_w = 0.5 * s1 * gw
    y = quad_y.nodes
    n, dim = y.shape
    m = x.shape[0]
    A = np.zeros((m, n))
    B = np.zeros((m, n))
    for s, sw in zip(s_nodes, s_w):
        a = math.sqrt(1.0 - s * s)
        z = (a * x[:, None, :] + s * y[None, :, :]).reshape(-1, dim)
        w = (s * x[:, None, :] - a * y[None, :, :]).reshape(-1, dim)
        cz = np.asarray(c.value(0.0, z), dtype=float)
        J = c.jac(0.0, z)
        quad_form = np.einsum("ki,kij,kj->k", w, J, w)
        A += sw * (quad_form - np.einsum("ki,ki->k", cz, z)).reshape(m, n)
        B += sw * (s / a) * np.einsum("ki,ki->k", cz, w).reshape(m, n)
    A /= eps
    B /= eps
    alpha = np.asarray(v((math.exp(-eps) * x[:, None, :] + s1 * y[None, :, :]).reshape(-1, dim)),
                       dtype=float).reshape(m, n)
    return alpha * A, alpha * B


def commutator_split_diagnostic(v, c, eps, x, quad_y=None, t_nodes=32):
    """``(int alpha A d gamma(y), int alpha B d gamma(y))`` at ``x``.

    ``smoothing_factor(eps) * (A_term + B_term)`` reproduces ``-r^eps(x)``.
    ``c`` must be a :class:`FieldSpec` (its Jacobian is used).
    """
    if eps <= 0:
        raise DomainError("eps must be > 0")
    x = np.asarray(x, dtype=float)
    xb = x[None, :] if x.ndim == 1 else x
    if quad_y is None:
        quad_y = default_inner_quadrature(c.dim)
    aA, aB = _split_integrands(v, c, eps, xb, quad_y, t_nodes)
    A = np.einsum("mn,n->m", aA, quad_y.weights)
    B = np.einsum("mn,n->m", aB, quad_y.weights)
    if x.ndim == 1:
        return float(A[0]), float(B[0])
    return A, B


def b_term_l1(v, c, eps, n_outer=2000, seed=0, quad_y=None, t_nodes=32):
    """``beta_eps E_x E_y |alpha B|`` with its standard error (over ``x``)."""
    if quad_y is None:
        quad_y = default_inner_quadrature(c.dim)
    outer = gaussian_samples(c.dim, n_outer, derive_seed(seed, "outer"))

    def per_point(xb):
        _, aB = _split_integrands(v, c, eps, xb, quad_y, t_nodes)
        return np.einsum("mn,n->m", np.abs(aB), quad_y.weights)

    vals = chunked_map(per_point, outer, chunk_size=256)
    mean, se = mc_mean(vals)
    beta = smoothing_factor(eps)
    return beta * mean, beta * se


SCALAR_KINDS = ("zero", "one", "z1", "z1_squared", "hermite2")


def scalar_function(kind):
    """Named scalar test functions of the first coordinate (batch callables)."""
    table = {
        "zero": lambda X: np.zeros(np.asarray(X).shape[0]),
        "one": lambda X: np.ones(np.asarray(X).shape[0]),
        "z1": lambda X: np.asarray(X, dtype=float)[:, 0].copy(),
        "z1_squared": lambda X: np.asarray(X, dtype=float)[:, 0] ** 2,
        "hermite2": lambda X: np.asarray(X, dtype=float)[:, 0] ** 2 - 1.0,
    }
    if kind not in table:
        raise ConfigurationError(f"unknown scalar function {kind!r}")
    return table[kind]
