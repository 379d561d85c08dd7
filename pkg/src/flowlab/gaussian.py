"""Standard Gaussian measure on R^N: quadrature, sampling and moment identities.

All integrals in flowlab are expectations against the standard Gaussian
``gamma`` (product of N standard normals).  Two kinds of rule are provided:

* tensor Gauss-Hermite, nodes from the Golub-Welsch eigenproblem for the
  probabilists' Hermite recurrence ``He_{k+1} = x He_k - k He_{k-1}``;
* seeded Monte Carlo using numpy's PCG64 generator.

Monte Carlo nodes are drawn as a ``(dim, n)`` array and transposed, so the
first ``M`` coordinates of a ``dim``-dimensional sample set coincide with
the ``M``-dimensional sample set for the same seed.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.linalg import eigh_tridiagonal

from .errors import ConfigurationError, check_finite

GAUSS_HERMITE = "gauss_hermite"
MONTE_CARLO = "monte_carlo"

MAX_NODES = 10**7

_KIND_ALIASES = {
    "gh": GAUSS_HERMITE,
    "gauss_hermite": GAUSS_HERMITE,
    "gauss-hermite": GAUSS_HERMITE,
    "mc": MONTE_CARLO,
    "monte_carlo": MONTE_CARLO,
    "monte-carlo": MONTE_CARLO,
}


def derive_seed(master, purpose):
    """Split a master seed into a per-purpose 64-bit sub-seed.

    The sub-seed is the first 8 bytes (big endian) of
    ``sha256(f"{master}:{purpose}")``.  Changing one consumer's sample count
    therefore never perturbs another consumer's stream.
    """
    digest = hashlib.sha256(f"{int(master)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def rng_from_seed(seed):
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian_samples(dim, n, seed):
    """``n`` i.i.d. standard normal points in R^dim as an ``(n, dim)`` array."""
    return rng_from_seed(seed).standard_normal((dim, n)).T.copy()


def hermite_rule(n):
    """1-D Gauss-Hermite rule for the standard normal (weights sum to one)."""
    if n < 1:
        raise ConfigurationError("nodes_per_axis must be >= 1")
    if n == 1:
        return np.zeros(1), np.ones(1)
    off = np.sqrt(np.arange(1, n, dtype=float))
    nodes = eigh_tridiagonal(np.zeros(n), off, eigvals_only=True)
    # Christoffel weights 1 / sum_k p_k(x)^2 with orthonormal Hermite p_k; unlike
    # squared eigenvector entries they keep full relative accuracy in the tails
    p_prev, p_cur = np.zeros(n), np.ones(n)
    total = np.ones(n)
    log_scale = np.zeros(n)  # true values are the stored ones times exp(log_scale)
    for k in range(1, n):
        p_prev, p_cur = p_cur, (nodes * p_cur - math.sqrt(k - 1) * p_prev) / math.sqrt(k)
        big = np.abs(p_cur) > 1e100
        if big.any():
            p_prev[big] *= 1e-100
            p_cur[big] *= 1e-100
            total[big] *= 1e-200
            log_scale[big] += 100.0 * math.log(10.0)
        total += p_cur * p_cur
    weights = np.exp(-np.log(total) - 2.0 * log_scale)
    # enforce exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if n % 2 == 1:
        nodes[n // 2] = 0.0
    return nodes, weights / weights.sum()


@dataclass(frozen=True, eq=False)
class QuadratureScheme:
    """A rule for expectations against the standard Gaussian in R^dim."""

    kind: str
    dim: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    nodes_per_axis: Optional[int] = None
    sample_count: Optional[int] = None
    seed: Optional[int] = None

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def is_monte_carlo(self):
        return self.kind == MONTE_CARLO


def make_quadrature(kind, dim, resolution, seed=None):
    """Build a quadrature scheme.

    ``resolution`` is the number of nodes per axis for Gauss-Hermite and the
    sample count for Monte Carlo.
    """
    name = kind
    kind = _KIND_ALIASES.get(str(name).lower())
    if kind is None:
        raise ConfigurationError(f"unknown quadrature kind {name!r}")
    dim = int(dim)
    resolution = int(resolution)
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if resolution < 1:
        raise ConfigurationError("resolution must be >= 1")

    if kind == GAUSS_HERMITE:
        if dim * math.log(resolution) > math.log(MAX_NODES) + 1e-12:
            raise ConfigurationError(
                f"Gauss-Hermite grid {resolution}^{dim} exceeds {MAX_NODES} nodes"
            )
        x1, w1 = hermite_rule(resolution)
        grids = np.meshgrid(*([x1] * dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = w1
        for _ in range(dim - 1):
            weights = np.multiply.outer(weights, w1)
        return QuadratureScheme(GAUSS_HERMITE, dim, nodes, weights.ravel(),
                                nodes_per_axis=resolution)

    if resolution > MAX_NODES:
        raise ConfigurationError(f"sample count exceeds {MAX_NODES}")
    if seed is None:
        raise ConfigurationError("Monte Carlo quadrature requires a seed")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    nodes = gaussian_samples(dim, resolution, seed)
    weights = np.full(resolution, 1.0 / resolution)
    return QuadratureScheme(MONTE_CARLO, dim, nodes, weights,
                            sample_count=resolution, seed=seed)


def default_inner_quadrature(dim, seed=0, mc_samples=4096):
    """Default rule for inner (Mehler, projection) integrals.

    Gauss-Hermite up to dimension 4, seeded Monte Carlo above.
    """
    per_axis = {1: 40, 2: 20, 3: 12, 4: 8}
    if dim <= 4:
        return make_quadrature(GAUSS_HERMITE, dim, per_axis[dim])
    return make_quadrature(MONTE_CARLO, dim, mc_samples, derive_seed(seed, "inner"))


def expectation(f, quad):
    """Integral of ``f`` against the Gaussian, as a weighted sum over nodes.

    ``f`` maps an ``(n, dim)`` array of points to an ``(n,)`` or ``(n, k)``
    array; vector-valued integrands are integrated componentwise.
    """
    values = check_finite(np.asarray(f(quad.nodes), dtype=float), quad.nodes)
    w = quad.weights.reshape((-1,) + (1,) * (values.ndim - 1))
    total = np.sum(values * w, axis=0)
    return float(total) if np.ndim(total) == 0 else total


def mc_mean(values):
    """Sample mean and its standard error."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def lp_norm(f, p, quad):
    """``(E|f|^p)^(1/p)`` for a scalar or vector valued ``f`` (Euclidean norm)."""
    def integrand(x):
        val = np.asarray(f(x), dtype=float)
        if val.ndim > 1:
            val = np.linalg.norm(val, axis=-1)
        return np.abs(val) ** p
    return expectation(integrand, quad) ** (1.0 / p)


def lambda_moment(p):
    """Absolute moment constant ``(E|g|^p)^(1/p)`` for a 1-D standard normal ``g``."""
    p = float(p)
    if p < 1:
        raise ValueError("p must be >= 1")
    val, _ = integrate.quad(lambda x: x**p * math.exp(-0.5 * x * x), 0.0, np.inf,
                            epsabs=0.0, epsrel=1e-13, limit=200)
    return (2.0 * val / math.sqrt(2.0 * math.pi)) ** (1.0 / p)


def gaussian_rotation(x, y, eps):
    """Measure-preserving rotation of ``gamma x gamma`` used in the commutator bounds.

    Returns ``(z, w)`` with ``z = e^-eps x + sqrt(1-e^-2eps) y`` and
    ``w = -sqrt(1-e^-2eps) x + e^-eps y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same shape")
    a = math.exp(-eps)
    s = math.sqrt(-math.expm1(-2.0 * eps))
    return a * x + s * y, -s * x + a * y


def moment_identity_check(l, p, quad):
    """Both sides of ``(E|l.w|^p)^(1/p) = Lambda(p) |l|``."""
    l = np.asarray(l, dtype=float)
    lhs = expectation(lambda w: np.abs(w @ l) ** p, quad) ** (1.0 / p)
    rhs = lambda_moment(p) * float(np.linalg.norm(l))
    return lhs, rhs


def _quadratic_form(A, w):
    return np.einsum("ni,ij,nj->n", w, A, w)


def quadratic_cancellation(A, c, quad):
    """Both sides of ``E|<Aw,w> - c|^2 = 2 |A_sym|_HS^2 + (tr A - c)^2``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    lhs_sq = expectation(lambda w: (_quadratic_form(A, w) - c) ** 2, quad)
    sym = 0.5 * (A + A.T)
    rhs_sq = 2.0 * float(np.sum(sym * sym)) + (float(np.trace(A)) - c) ** 2
    return lhs_sq, rhs_sq


def quadratic_cancellation_bound(A, c, q, quad):
    """``((E|<Aw,w> - c|^q)^(1/q), sqrt(2) |A_sym|_HS + |tr A - c|)`` for ``q <= 2``."""
    A = np.asarray(A, dtype=float)
    lhs = expectation(lambda w: np.abs(_quadratic_form(A, w) - c) ** q, quad) ** (1.0 / q)
    sym = 0.5 * (A + A.T)
    rhs = math.sqrt(2.0) * float(np.sqrt(np.sum(sym * sym))) + abs(float(np.trace(A)) - c)
    return lhs, rhs


def moment_identity_mc(l, p, n, seed):
    """``E|l.w|^p`` by Monte Carlo with its standard error, and ``(Lambda(p) |l|)^p``.

    The comparison is made on the p-th powers, where the estimator is an
    unbiased sample mean.
    """
    l = np.asarray(l, dtype=float)
    w = gaussian_samples(l.shape[0], int(n), seed)
    mean, se = mc_mean(np.abs(w @ l) ** p)
    return mean, se, (lambda_moment(p) * float(np.linalg.norm(l))) ** p
