"""Built-in vector fields with closed-form derivatives.

The catalogue is the only external source of fields: a JSON descriptor
``{"kind": ..., "params": {...}}`` is resolved here, never by loading code.
"""

import numpy as np

from .errors import ConfigurationError
from .fields import FieldSpec


def _dim_from(params, dim):
    d = params.get("dim", dim)
    if d is None:
        raise ConfigurationError("field descriptor needs a dimension")
    return int(d)


def zero_field(dim, horizon=1.0, **kw):
    return constant_field(np.zeros(dim), horizon, **kw)


def constant_field(vector, horizon=1.0, p=2.0, q=2.0):
    v = np.atleast_1d(np.asarray(vector, dtype=float))
    n = v.shape[0]
    return FieldSpec(
        n,
        lambda t, X: np.broadcast_to(v, X.shape).copy(),
        horizon=horizon,
        jacobian=lambda t, X: np.zeros((X.shape[0], n, n)),
        divergence=lambda t, X: np.zeros(X.shape[0]),
        gaussian_divergence=lambda t, X: -(X @ v),
        p=p, q=q, name="constant",
    )


def linear_field(matrix, horizon=1.0, p=2.0, q=2.0, time_rate=0.0):
    """``b_t(x) = (1 + time_rate * t) A x``."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ConfigurationError("linear field needs a square matrix")
    n = A.shape[0]
    tr = float(np.trace(A))

    def g(t):
        return 1.0 + time_rate * t

    return FieldSpec(
        n,
        lambda t, X: g(t) * np.einsum("ij,mj->mi", A, X),
        horizon=horizon,
        jacobian=lambda t, X: np.broadcast_to(g(t) * A, (X.shape[0], n, n)).copy(),
        divergence=lambda t, X: np.full(X.shape[0], g(t) * tr),
        gaussian_divergence=lambda t, X: g(t) * (tr - np.einsum("mi,ij,mj->m", X, A, X)),
        p=p, q=q, name="linear" if time_rate == 0 else "time_linear",
    )


def rotation_field(dim=2, omega=1.0, horizon=1.0, p=2.0, q=2.0):
    """Planar rotation ``(-omega x_2, omega x_1, 0, ...)``; measure preserving."""
    if dim < 2:
        raise ConfigurationError("rotation field needs dim >= 2")
    L = np.zeros((dim, dim))
    L[0, 1], L[1, 0] = -omega, omega
    f = linear_field(L, horizon, p, q)
    return FieldSpec(dim, f.value, horizon=horizon, jacobian=f.jacobian,
                     divergence=f.divergence,
                     gaussian_divergence=lambda t, X: np.zeros(X.shape[0]),
                     p=p, q=q, name="rotation")


def gradient_perturbation_field(dim=2, a=0.5, horizon=1.0, p=2.0, q=2.0):
    """``b(x) = -x (1 + a sin x_1)``."""
    def value(t, X):
        return -X * (1.0 + a * np.sin(X[:, :1]))

    def jacobian(t, X):
        m = X.shape[0]
        g = 1.0 + a * np.sin(X[:, 0])
        J = -g[:, None, None] * np.eye(dim)[None]
        J[:, :, 0] -= a * np.cos(X[:, 0])[:, None] * X
        return J

    def divergence(t, X):
        return -dim * (1.0 + a * np.sin(X[:, 0])) - a * X[:, 0] * np.cos(X[:, 0])

    def gdiv(t, X):
        g = 1.0 + a * np.sin(X[:, 0])
        return divergence(t, X) + g * np.sum(X * X, axis=1)

    return FieldSpec(dim, value, horizon=horizon, jacobian=jacobian, divergence=divergence,
                     gaussian_divergence=gdiv, p=p, q=q, name="gradient_perturbation")


def low_regularity_field(dim=2, alpha=0.5, delta=0.2, scale=1.0, horizon=1.0, p=2.0, q=2.0):
    """``b(x) = scale * x / max(|x|, delta)^(1 - alpha)``: Hoelder-type profile with a kink."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if delta <= 0:
        raise ConfigurationError("delta must be > 0")

    def radius(X):
        return np.maximum(np.linalg.norm(X, axis=1), delta)

    def value(t, X):
        return scale * X * (radius(X) ** (alpha - 1.0))[:, None]

    def jacobian(t, X):
        rad = np.linalg.norm(X, axis=1)
        m = np.maximum(rad, delta)
        J = (scale * m ** (alpha - 1.0))[:, None, None] * np.eye(dim)[None]
        outer = rad > delta
        if outer.any():
            Xo = X[outer]
            ro = rad[outer]
            J[outer] += (scale * (alpha - 1.0) * ro ** (alpha - 3.0))[:, None, None] * \
                np.einsum("mi,mj->mij", Xo, Xo)
        return J

    def divergence(t, X):
        rad = np.linalg.norm(X, axis=1)
        m = np.maximum(rad, delta)
        extra = np.where(rad > delta, alpha - 1.0, 0.0)
        return scale * m ** (alpha - 1.0) * (dim + extra)

    def gdiv(t, X):
        m = radius(X)
        return divergence(t, X) - scale * m ** (alpha - 1.0) * np.sum(X * X, axis=1)

    return FieldSpec(dim, value, horizon=horizon, jacobian=jacobian, divergence=divergence,
                     gaussian_divergence=gdiv, p=p, q=q, name="low_regularity")


def product_field(dim=2, a=0.5, horizon=1.0, p=2.0, q=2.0):
    """``b^i(x) = -x_i (1 + a sin x_i)``; component ``i`` depends on ``x_i`` only."""
    def value(t, X):
        return -X * (1.0 + a * np.sin(X))

    def diag(X):
        return -(1.0 + a * np.sin(X)) - a * X * np.cos(X)

    def jacobian(t, X):
        d = diag(X)
        J = np.zeros((X.shape[0], dim, dim))
        idx = np.arange(dim)
        J[:, idx, idx] = d
        return J

    def divergence(t, X):
        return np.sum(diag(X), axis=1)

    def gdiv(t, X):
        return divergence(t, X) + np.sum(X * X * (1.0 + a * np.sin(X)), axis=1)

    return FieldSpec(dim, value, horizon=horizon, jacobian=jacobian, divergence=divergence,
                     gaussian_divergence=gdiv, p=p, q=q, name="product")


def coupled_field(dim=2, kappa=0.5, horizon=1.0, p=2.0, q=2.0):
    """``b^i = -x_i + kappa 2^-i sin(x_{i+1})`` for ``i < dim``, ``b^dim = -x_dim``.

    For every ``N`` the conditional expectation of the first ``N`` components
    of the ``N+1`` dimensional field is the ``N`` dimensional field, because
    ``E sin(x_{N+1}) = 0``: the family is consistent.
    """
    k = kappa * 2.0 ** -np.arange(1, dim)

    def value(t, X):
        out = -X.copy()
        out[:, :-1] += k * np.sin(X[:, 1:])
        return out

    def jacobian(t, X):
        J = np.zeros((X.shape[0], dim, dim))
        idx = np.arange(dim)
        J[:, idx, idx] = -1.0
        if dim > 1:
            J[:, idx[:-1], idx[1:]] = k * np.cos(X[:, 1:])
        return J

    def divergence(t, X):
        return np.full(X.shape[0], -float(dim))

    def gdiv(t, X):
        return divergence(t, X) - np.einsum("mi,mi->m", value(t, X), X)

    return FieldSpec(dim, value, horizon=horizon, jacobian=jacobian, divergence=divergence,
                     gaussian_divergence=gdiv, p=p, q=q, name="coupled")


CATALOGUE = {
    "zero": "b = 0",
    "constant": "b = v (params: vector)",
    "linear": "b = A x (params: matrix, time_rate)",
    "rotation": "planar rotation in (x_1, x_2) (params: dim, omega)",
    "gradient_perturbation": "b = -x (1 + a sin x_1) (params: dim, a)",
    "low_regularity": "b = scale x / max(|x|, delta)^(1-alpha) (params: dim, alpha, delta, scale)",
    "product": "b^i = -x_i (1 + a sin x_i) (params: dim, a)",
    "coupled": "b^i = -x_i + kappa 2^-i sin x_{i+1} (params: dim, kappa)",
}

SMOOTH_KINDS = ("constant", "linear", "rotation", "gradient_perturbation")

DEFAULT_PARAMS = {
    "constant": {"vector": [1.0, 0.5]},
    "linear": {"matrix": [[-0.1, 0.4], [-0.3, 0.05]]},
    "rotation": {"omega": 1.0},
    "gradient_perturbation": {"a": 0.5},
    "low_regularity": {"alpha": 0.5, "delta": 0.2, "scale": 1.0},
    "product": {"a": 0.5},
    "coupled": {"kappa": 0.5},
}


def field_from_descriptor(desc, dim=None, horizon=1.0, p=2.0, q=2.0):
    """Build a :class:`FieldSpec` from ``{"kind": ..., "params": {...}}``."""
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ConfigurationError("field descriptor must be an object with a 'kind'")
    kind = desc["kind"]
    if kind == "custom_named":
        params = dict(desc.get("params", {}))
        kind = params.pop("name", None)
        desc = {"kind": kind, "params": params}
    if kind not in CATALOGUE:
        raise ConfigurationError(f"unknown field kind {kind!r}")
    params = dict(desc.get("params", {}))
    horizon = float(params.pop("horizon", horizon))
    common = dict(horizon=horizon, p=float(params.pop("p", p)), q=float(params.pop("q", q)))
    try:
        if kind == "zero":
            return zero_field(_dim_from(params, dim), **common)
        if kind == "constant":
            vec = params.get("vector")
            if vec is None:
                vec = np.ones(_dim_from(params, dim))
            return constant_field(vec, **common)
        if kind == "linear":
            return linear_field(params["matrix"], time_rate=float(params.get("time_rate", 0.0)),
                                **common)
        d = _dim_from(params, dim)
        params.pop("dim", None)
        builders = {
            "rotation": rotation_field,
            "gradient_perturbation": gradient_perturbation_field,
            "low_regularity": low_regularity_field,
            "product": product_field,
            "coupled": coupled_field,
        }
        return builders[kind](d, **{k: float(v) for k, v in params.items()}, **common)
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad parameters for field kind {kind!r}: {exc}") from exc


def default_field(kind, dim=2, horizon=1.0):
    """Catalogue field with the default parameters used by the test suite."""
    params = dict(DEFAULT_PARAMS.get(kind, {}))
    if kind not in ("constant", "linear"):
        params["dim"] = dim
    return field_from_descriptor({"kind": kind, "params": params}, dim=dim, horizon=horizon)
