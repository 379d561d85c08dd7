"""Config-driven experiments producing a verdict, a summary and a table.

A configuration is a JSON object validated against
``schema/config.schema.json``.  :func:`load_config` fills defaults and runs
the cross-field checks the schema cannot express; :func:`run_experiment`
dispatches on ``experiment`` and returns an :class:`ExperimentResult`.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import tolerances as tol
from .catalogue import SMOOTH_KINDS, coupled_field, field_from_descriptor, product_field
from .commutator import DEFAULT_EPS_GRID, commutator_report, scalar_function
from .errors import ConfigurationError
from .fields import RotationGroup, conjugate_exponent
from .flow import (IntegratorOptions, check_density_bound, dimension_consistency, fmt,
                   integrate_flow, rotated_flow_solve, semigroup_discrepancy, stability_metric)
from .gaussian import (default_inner_quadrature, derive_seed, gaussian_samples, make_quadrature,
                       moment_identity_mc, quadratic_cancellation)
from .ou import OuOperator, mehler_apply, self_adjoint_check

EXPERIMENTS = ("density_bound", "commutator_sweep", "semigroup", "stability",
               "dimension_consistency", "rotated_flow", "ou_properties",
               "cancellation_identities")

# experiment -> sweep keys it understands
SWEEP_KEYS = {
    "density_bound": ("K",),
    "semigroup": ("dt",),
    "stability": ("n_smoothing",),
    "dimension_consistency": ("N",),
    "rotated_flow": ("dt",),
}

DEFAULT_SWEEPS = {
    "stability": {"key": "n_smoothing", "values": [4, 8, 16, 32, 64]},
    "dimension_consistency": {"key": "N", "values": [1, 2, 3, 4]},
}

DEFAULTS = {
    "dim": 2,
    "horizon": 1.0,
    "p": 2.0,
    "q": 2.0,
    "time_steps": 10,
    "particles": 10_000,
    "seed": 0,
    "max_step": 1e-2,
    "r_max": 1e6,
}

_RATE_BLANK = ""


def load_schema():
    text = resources.files("flowlab").joinpath("schema/config.schema.json").read_text("utf-8")
    return json.loads(text)


def load_config(source, overrides=None):
    """Parse, validate and normalize a configuration (path or dict).

    ``overrides`` (e.g. a seed from the command line) replace top-level keys
    before validation.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"malformed JSON in {path}: {exc}") from exc
    if overrides:
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a JSON object")
        raw = dict(raw, **overrides)
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"schema violation at {where}: {exc.message}") from exc
    cfg = dict(DEFAULTS)
    cfg.update(raw)
    p, q = float(cfg["p"]), float(cfg["q"])
    r = max(conjugate_exponent(p), conjugate_exponent(q))
    if "r" in raw and not math.isclose(float(raw["r"]), r, rel_tol=1e-12):
        raise ConfigurationError(f"r = {raw['r']} does not equal max(p', q') = {r}")
    cfg["r"] = r
    T = float(cfg["horizon"])
    if cfg["experiment"] == "density_bound" and "c" in raw and float(raw["c"]) < r * T:
        raise ConfigurationError(f"exponential constant c = {raw['c']} is below r T = {r * T}")
    sweep = cfg.get("sweep") or DEFAULT_SWEEPS.get(cfg["experiment"])
    if sweep is not None:
        allowed = SWEEP_KEYS.get(cfg["experiment"], ())
        if sweep["key"] not in allowed:
            raise ConfigurationError(
                f"experiment {cfg['experiment']!r} has no sweep over {sweep['key']!r}")
        vals = np.asarray(sweep["values"], dtype=float)
        d = np.diff(vals)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigurationError("sweep values must be strictly monotone")
        cfg["sweep"] = sweep
    if "eps_grid" in cfg and not np.all(np.diff(cfg["eps_grid"]) < 0):
        raise ConfigurationError("eps_grid must be strictly decreasing")
    if cfg["experiment"] not in ("ou_properties", "cancellation_identities"):
        if "field" not in cfg:
            raise ConfigurationError(f"experiment {cfg['experiment']!r} needs a field descriptor")
        # resolve once so descriptor errors surface as configuration errors
        build_field(cfg)
    return cfg


def build_field(cfg, dim=None):
    return field_from_descriptor(cfg["field"], dim=dim or cfg["dim"], horizon=cfg["horizon"],
                                 p=cfg["p"], q=cfg["q"])


def _options(cfg):
    return IntegratorOptions(max_step=cfg["max_step"], r_max=cfg["r_max"])


def _grid(cfg, steps=None):
    return np.linspace(0.0, cfg["horizon"], int(steps or cfg["time_steps"]) + 1)


def _quadrature(cfg, dim):
    spec = cfg.get("quadrature")
    seed = derive_seed(cfg["seed"], "quadrature")
    if spec is None:
        return default_inner_quadrature(dim, seed)
    return make_quadrature(spec["kind"], dim, int(spec["resolution"]), seed)


@dataclass
class ExperimentResult:
    experiment: str
    passed: bool
    header: list
    rows: list
    summary: dict = field(default_factory=dict)

    def table_csv(self):
        lines = [",".join(self.header)]
        lines += [",".join(_cell(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt(v)


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def convergence_rates(params, metrics):
    """Log-log slope between consecutive rows; the first row has none."""
    rates = [None]
    for i in range(1, len(params)):
        a, b = metrics[i - 1], metrics[i]
        if a > 0 and b > 0:
            rates.append(math.log(b / a) / math.log(params[i] / params[i - 1]))
        else:
            rates.append(None)
    return rates


def _convergence(key, params, metrics, passed, summary):
    rates = convergence_rates(params, metrics)
    rows = [[float(p), float(m), _RATE_BLANK if r is None else float(r)]
            for p, m, r in zip(params, metrics, rates)]
    summary = dict(summary, sweep_key=key, rates=rates)
    return passed, ["parameter", "metric", "rate"], rows, summary


def _sweep_values(cfg):
    return [float(v) for v in cfg["sweep"]["values"]]


# --- individual experiments -------------------------------------------------


def _density_bound(cfg):
    f = build_field(cfg)
    quad = _quadrature(cfg, f.dim)
    grid = _grid(cfg)
    r_values = sorted({2.0, conjugate_exponent(f.p), conjugate_exponent(f.q)})
    if cfg.get("sweep"):
        ks = _sweep_values(cfg)
        metrics, ok = [], True
        for k in ks:
            rep = check_density_bound(f, cfg["r"], int(k), grid, quad, cfg["seed"], _options(cfg))
            ok = ok and rep.passed
            metrics.append(rep.std_error[-1])
        return _convergence("K", ks, metrics, ok, {"r": cfg["r"]})
    batch = integrate_flow(f, None, grid, _options(cfg), n_particles=cfg["particles"],
                           seed=cfg["seed"])
    rows, reports = [], []
    for r in r_values:
        rep = check_density_bound(f, r, cfg["particles"], grid, quad, batch=batch)
        reports.append(rep.as_dict())
        for t, a, s, m in zip(rep.times, rep.lhs, rep.std_error, rep.margin):
            rows.append([r, t, a, s, rep.rhs, m])
    passed = all(rep["passed"] for rep in reports)
    header = ["r", "t", "lhs", "std_error", "rhs", "margin"]
    return passed, header, rows, {"reports": reports}


def _commutator_sweep(cfg):
    c = build_field(cfg)
    v = scalar_function(cfg.get("v", "z1"))
    eps_grid = tuple(cfg.get("eps_grid", DEFAULT_EPS_GRID))
    quad = _quadrature(cfg, c.dim)
    rep = commutator_report(v, c, c.p, c.q, eps_grid, quad, n_outer=cfg["particles"],
                            seed=cfg["seed"])
    header, body = rep.rows()
    passed = not rep.violations
    limit_ok = None
    if c.name in SMOOTH_KINDS and len(eps_grid) > 1:
        first, last = rep.limit_residual[0], rep.limit_residual[-1]
        limit_ok = first <= tol.LIMIT_FLOOR or last <= tol.LIMIT_RATIO * first
        passed = passed and limit_ok
    summary = {"violations": rep.violations, "limit_ok": limit_ok, "norms": rep.norms}
    return passed, header, body, summary


def _semigroup(cfg):
    f = build_field(cfg)
    T = f.horizon
    pts = gaussian_samples(f.dim, cfg["particles"], derive_seed(cfg["seed"], "particles"))
    exact = f.name in ("constant", "zero")
    if cfg.get("sweep"):
        dts = _sweep_values(cfg)
        metrics = [semigroup_discrepancy(f, 0.0, T / 2, T, steps=max(1, round(T / dt)),
                                         points=pts) for dt in dts]
        rates = [r for r in convergence_rates(dts, metrics) if r is not None]
        if exact:
            passed = max(metrics) <= tol.SEMIGROUP_EXACT
        else:
            order = float(np.median(rates)) if rates else float("nan")
            passed = abs(order - tol.RK4_ORDER) <= tol.RK4_ORDER_SLACK
        return _convergence("dt", dts, metrics, passed, {"exact_field": exact})
    steps = int(cfg["time_steps"])
    d = semigroup_discrepancy(f, 0.0, T / 2, T, steps=steps, points=pts)
    passed = d <= tol.SEMIGROUP_EXACT if exact else bool(np.isfinite(d))
    return passed, ["r", "s", "t", "steps", "discrepancy"], [[0.0, T / 2, T, steps, d]], \
        {"exact_field": exact}


def _stability(cfg):
    f = build_field(cfg)
    ns = _sweep_values(cfg)
    pts = gaussian_samples(f.dim, cfg["particles"], derive_seed(cfg["seed"], "particles"))
    inner = default_inner_quadrature(f.dim, derive_seed(cfg["seed"], "inner"))
    metrics = stability_metric(f, ns, pts, _grid(cfg), _options(cfg), inner)
    identical = max(metrics) <= tol.IDENTICAL_FLOWS
    order = np.sign(ns[-1] - ns[0])
    decreasing = all(order * (b - a) < 0 for a, b in zip(metrics, metrics[1:]))
    return _convergence("n_smoothing", ns, metrics, identical or decreasing,
                        {"identical_flows": identical})


def _dimension_consistency(cfg):
    kind = cfg["field"]["kind"]
    if kind not in ("product", "coupled"):
        raise ConfigurationError("dimension_consistency needs a product or coupled field family")
    params = {k: float(v) for k, v in cfg["field"].get("params", {}).items() if k != "dim"}
    common = dict(horizon=cfg["horizon"], p=cfg["p"], q=cfg["q"])
    if kind == "product":
        def builder(n):
            return product_field(n, **params, **common)
    else:
        def builder(n):
            return coupled_field(n, **params, **common)
    dims = [int(v) for v in _sweep_values(cfg)]
    if min(dims) < 1:
        raise ConfigurationError("dimensions must be >= 1")
    metrics = dimension_consistency(builder, dims, cfg["particles"], cfg["seed"], _grid(cfg),
                                    _options(cfg))
    if kind == "product":
        passed = max(metrics) <= tol.PRODUCT_CONSISTENCY
    else:
        passed = all(b < a for a, b in zip(metrics, metrics[1:]))
    return _convergence("N", dims, metrics, passed, {"family": kind})


def _rotated_flow(cfg):
    f = build_field(cfg)
    G = RotationGroup.planar(f.dim, float(cfg.get("omega", 1.0)))
    pts = gaussian_samples(f.dim, cfg["particles"], derive_seed(cfg["seed"], "particles"))
    if cfg.get("sweep"):
        dts = _sweep_values(cfg)
        metrics = []
        for dt in dts:
            steps = max(2, round(f.horizon / dt))
            batch = rotated_flow_solve(f, G, pts, _grid(cfg, steps), _options(cfg))
            metrics.append(float(batch.duhamel_residual.max()))
        return _convergence("dt", dts, metrics, max(metrics) <= tol.DUHAMEL, {})
    # the Duhamel integral runs over the stored trajectory: keep it at the step size
    steps = max(int(cfg["time_steps"]), math.ceil(f.horizon / cfg["max_step"] - 1e-9))
    batch = rotated_flow_solve(f, G, pts, _grid(cfg, steps), _options(cfg))
    res = batch.duhamel_residual
    rows = [[t, float(res[:, i].mean()), float(res[:, i].max())]
            for i, t in enumerate(batch.time_grid)]
    passed = float(res.max()) <= tol.DUHAMEL
    return passed, ["t", "mean_duhamel_residual", "max_duhamel_residual"], rows, \
        {"dead_particles": int((~batch.alive).sum())}


def _hermite(k, x):
    return np.polynomial.hermite_e.hermeval(x, [0.0] * k + [1.0])


def _ou_properties(cfg):
    quad = make_quadrature("gauss_hermite", 1, 20)
    outer = make_quadrature("gauss_hermite", 1, 20)
    xs = np.linspace(-2.0, 2.0, 9)[:, None]
    rows = []
    for t in cfg.get("t_values", [0.1, 0.5, 1.0]):
        op = OuOperator(float(t), quad)
        for k in range(5):
            got = mehler_apply(lambda z, k=k: _hermite(k, z[:, 0]), op, xs)
            want = math.exp(-k * t) * _hermite(k, xs[:, 0])
            err = float(np.max(np.abs(got - want)) / max(1.0, float(np.max(np.abs(want)))))
            rows.append([f"hermite_{k}", float(t), err, tol.QUADRATURE_IDENTITY])

        def poly(z):
            return z[:, 0] ** 4 - 2.0 * z[:, 0] ** 3 + z[:, 0]

        half = OuOperator(float(t) / 2, quad)
        twice = mehler_apply(lambda z: mehler_apply(poly, half, z), half, xs)
        once = mehler_apply(poly, op, xs)
        rows.append(["composition", float(t), float(np.max(np.abs(twice - once))),
                     tol.QUADRATURE_IDENTITY])
        lhs, rhs = self_adjoint_check(lambda z: z[:, 0] ** 3, lambda z: z[:, 0] ** 2 + z[:, 0],
                                      float(t), outer, op)
        rows.append(["self_adjoint", float(t), abs(lhs - rhs), tol.QUADRATURE_IDENTITY])
    rows = [row + [row[2] <= row[3]] for row in rows]
    passed = all(row[-1] for row in rows)
    return passed, ["check", "t", "error", "tolerance", "passed"], rows, {}


def _cancellation_identities(cfg):
    dim = int(cfg["dim"])
    if dim > 4:
        raise ConfigurationError("cancellation identities are checked for dim <= 4")
    res = int(cfg.get("quadrature", {}).get("resolution", 8))
    if res < 5:
        raise ConfigurationError("quadratic cancellation needs >= 5 Gauss-Hermite nodes per axis")
    quad = make_quadrature("gauss_hermite", dim, res)
    rng = np.random.Generator(np.random.PCG64(derive_seed(cfg["seed"], "matrices")))
    rows = []
    for i in range(int(cfg.get("n_matrices", 20))):
        A = rng.uniform(-1.0, 1.0, (dim, dim))
        c = float(rng.uniform(-1.0, 1.0))
        lhs, rhs = quadratic_cancellation(A, c, quad)
        err = abs(lhs - rhs)
        rows.append([f"quadratic_{i}", lhs, rhs, err, tol.QUADRATURE_IDENTITY,
                     err <= tol.QUADRATURE_IDENTITY])
    n = int(cfg.get("mc_samples", 1_000_000))
    l = rng.normal(size=dim)
    for p in cfg.get("p_values", [1.0, 1.5, 3.0]):
        mean, se, want = moment_identity_mc(l, float(p), n, derive_seed(cfg["seed"], f"moment{p}"))
        err = abs(mean - want)
        rows.append([f"moment_p{p:g}", mean, want, err, tol.MC_SIGMAS * se,
                     err <= tol.MC_SIGMAS * se])
    passed = all(row[-1] for row in rows)
    return passed, ["check", "lhs", "rhs", "error", "tolerance", "passed"], rows, {}


_RUNNERS = {
    "density_bound": _density_bound,
    "commutator_sweep": _commutator_sweep,
    "semigroup": _semigroup,
    "stability": _stability,
    "dimension_consistency": _dimension_consistency,
    "rotated_flow": _rotated_flow,
    "ou_properties": _ou_properties,
    "cancellation_identities": _cancellation_identities,
}


def run_experiment(cfg):
    """Run a normalized configuration (see :func:`load_config`)."""
    passed, header, rows, summary = _RUNNERS[cfg["experiment"]](cfg)
    return ExperimentResult(cfg["experiment"], bool(passed), header, rows, _json_safe(summary))


def build_id():
    """``sha1`` over the package sources, in sorted path order (git-style hex id)."""
    h = hashlib.sha1()
    root = resources.files("flowlab")
    for path in sorted(Path(str(root)).rglob("*"), key=lambda p: p.as_posix()):
        if path.suffix in (".py", ".json") and "__pycache__" not in path.parts:
            h.update(path.relative_to(Path(str(root))).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def build_report(cfg, result, timestamp):
    """JSON-ready report; only ``timestamp`` may differ between identical runs."""
    return {
        "build_id": build_id(),
        "experiment": result.experiment,
        "passed": result.passed,
        "seed": int(cfg["seed"]),
        "config": _json_safe(cfg),
        "tolerances": tol.as_dict(),
        "summary": result.summary,
        "table": {"header": result.header,
                  "rows": [[_cell(v) for v in row] for row in result.rows]},
        "timestamp": timestamp,
    }
