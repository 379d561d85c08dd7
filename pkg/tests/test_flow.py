import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad as adaptive_quad
from scipy.linalg import expm
from scipy.stats import norm

from flowlab.catalogue import (constant_field, coupled_field, default_field, linear_field,
                               product_field, rotation_field)
from flowlab.errors import ConfigurationError, DomainError
from flowlab.fields import FieldSpec, RotationGroup
from flowlab.flow import (IntegratorOptions, check_density_bound, density_lr_norm,
                          dimension_consistency, divergence_exp_bound, exp_bound_details,
                          flow_from_time, flow_jacobian_fd, integrate_flow, rotated_flow_solve,
                          sample_initial_points, semigroup_discrepancy, stability_metric)
from flowlab.gaussian import make_quadrature

A = np.array([[-0.1, 0.4], [-0.3, 0.05]])
FINE = IntegratorOptions(max_step=1e-2)
GRID = np.linspace(0.0, 1.0, 11)


def gaussian_oracle(fn):
    """Adaptive 1-D quadrature of fn against the standard normal density."""
    # the Gaussian mass beyond |x| = 40 is far below double precision
    return adaptive_quad(lambda x: fn(x) * norm.pdf(x), -40.0, 40.0, points=[-1.0, 0.0, 1.0],
                         epsabs=1e-13, epsrel=1e-12, limit=400)[0]


def test_constant_field_is_exact():
    v = np.array([0.7, -0.4])
    pts = sample_initial_points(2, 500, 3)
    b = integrate_flow(constant_field(v), pts, GRID, IntegratorOptions(steps_per_interval=1))
    for i, t in enumerate(GRID):
        np.testing.assert_allclose(b.positions[:, i], pts + t * v, atol=1e-14)
        # Cameron-Martin: u_t(y) = exp(t<v,y> - t^2|v|^2/2) at y = x + t v
        y = pts + t * v
        np.testing.assert_allclose(b.log_density[:, i], t * y @ v - 0.5 * t * t * v @ v,
                                   atol=1e-13)
    assert np.all(b.log_jacobian == 0)
    assert np.all(b.log_density[:, 0] == 0)


def test_linear_field_against_matrix_exponential():
    pts = sample_initial_points(2, 200, 1)
    b = integrate_flow(linear_field(A), pts, GRID, FINE)
    for i, t in enumerate(GRID):
        np.testing.assert_allclose(b.positions[:, i], pts @ expm(t * A).T, atol=1e-10)
        np.testing.assert_allclose(b.log_jacobian[:, i], t * np.trace(A), atol=1e-8)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_random_linear_fields(entries):
    M = np.array(entries).reshape(2, 2)
    pts = np.array([[0.5, -1.0], [2.0, 0.3]])
    b = integrate_flow(linear_field(M), pts, [0.0, 1.0], FINE)
    np.testing.assert_allclose(b.final(), pts @ expm(M).T, atol=1e-9)
    assert np.max(np.abs(b.log_jacobian[:, -1] - np.trace(M))) <= 1e-8


def test_rotation_preserves_norm_and_density():
    pts = sample_initial_points(2, 300, 2)
    b = integrate_flow(rotation_field(2), pts, GRID, FINE)
    radius = np.linalg.norm(pts, axis=1)[:, None]
    np.testing.assert_allclose(np.linalg.norm(b.positions, axis=2),
                               np.broadcast_to(radius, (pts.shape[0], GRID.size)), rtol=1e-10)
    assert np.all(b.log_density == 0)


def test_time_dependent_linear_field():
    M = np.array([[0.2, 0.0], [0.0, -0.5]])
    f = linear_field(M, time_rate=1.0)  # b_t = (1 + t) M x
    pts = np.array([[1.0, 1.0]])
    b = integrate_flow(f, pts, [0.0, 1.0], FINE)
    np.testing.assert_allclose(b.final()[0], np.exp(1.5 * np.diag(M)), rtol=1e-10)


@pytest.mark.parametrize("kind", ["linear", "gradient_perturbation", "coupled", "low_regularity"])
def test_mass_conservation(kind):
    b = integrate_flow(default_field(kind), None, GRID, FINE, n_particles=20_000, seed=4)
    mean, se = density_lr_norm(b, 1.0)
    assert abs(mean - 1.0) <= 3 * se + 1e-12


def test_density_norm_examples():
    b = integrate_flow(rotation_field(2), None, GRID, FINE, n_particles=1000)
    for r in (1.0, 2.0, 5.0):
        assert density_lr_norm(b, r) == (1.0, 0.0)
    c = integrate_flow(constant_field([1.0]), None, [0.0, 1.0], FINE, n_particles=100_000,
                       seed=8)
    mean, se = density_lr_norm(c, 2.0)
    assert abs(mean - math.e) <= 3 * se
    with pytest.raises(DomainError):
        density_lr_norm(c, 0.5)


def test_exp_bound_examples():
    q1 = make_quadrature("gh", 1, 200)
    assert divergence_exp_bound(rotation_field(2), 3.0, make_quadrature("gh", 2, 10), GRID) == 1.0
    got = divergence_exp_bound(constant_field([1.0]), 2.0, q1, GRID)
    assert got == pytest.approx(0.5 + math.e ** 2 * norm.cdf(2.0), rel=1e-3)
    assert got == pytest.approx(gaussian_oracle(lambda x: math.exp(2 * max(x, 0.0))), rel=1e-3)


def test_exp_bound_inward_linear_field():
    # div_gamma(-x) = x^2 - 1: the integrand exp(2 (1 - x^2)^+) has kinks at +-1, so
    # Gauss-Hermite converges slowly and oscillates around the adaptive oracle
    neg = linear_field([[-1.0]])
    want = gaussian_oracle(lambda x: math.exp(2 * max(0.0, 1 - x * x)))
    for n in (80, 200, 400, 800):
        got = divergence_exp_bound(neg, 2.0, make_quadrature("gh", 1, n), GRID)
        assert got == pytest.approx(want, rel=3e-3)
        assert got <= math.exp(2.0)


def test_exp_bound_guard_trips_on_non_integrable_tail():
    f = linear_field(np.eye(2))
    res = exp_bound_details(f, 2.0, make_quadrature("gh", 2, 10), GRID)
    assert math.isinf(res.value) and res.reason == "tail"
    with pytest.warns(RuntimeWarning):
        assert math.isinf(divergence_exp_bound(f, 2.0, make_quadrature("gh", 2, 10), GRID))
    hot = linear_field([[-30.0]])
    res = exp_bound_details(hot, 30.0, make_quadrature("gh", 1, 40), GRID)
    assert math.isinf(res.value) and res.reason == "overflow" and res.offending_point is not None


def test_check_density_bound_examples():
    rep = check_density_bound(rotation_field(2), 2.0, 2000, GRID, make_quadrature("gh", 2, 10))
    assert rep.passed and rep.rhs == 1.0 and set(rep.lhs) == {1.0}
    rep = check_density_bound(constant_field([1.0]), 2.0, 100_000, [0.0, 1.0],
                              make_quadrature("gh", 1, 200), seed=8, options=FINE)
    assert rep.passed and min(rep.margin) > 0
    assert rep.rhs == pytest.approx(7.72095, abs=1e-2)
    assert abs(rep.lhs[-1] - math.e) <= 3 * rep.std_error[-1]
    rep = check_density_bound(linear_field(np.eye(2)), 2.0, 500, GRID,
                              make_quadrature("gh", 2, 10))
    assert rep.passed and rep.vacuous and math.isinf(rep.rhs)
    d = rep.as_dict()
    assert d["vacuous"] is True and len(d["lhs"]) == GRID.size


def test_flow_from_time():
    pts = sample_initial_points(2, 100, 0)
    a = flow_from_time(linear_field(A), 0.0, pts, GRID, FINE)
    b = integrate_flow(linear_field(A), pts, GRID, FINE)
    assert np.array_equal(a.positions, b.positions)
    v = np.array([1.0, -2.0])
    c = flow_from_time(constant_field(v), 0.4, pts, [0.4, 0.7, 1.0], FINE)
    np.testing.assert_allclose(c.final(), pts + 0.6 * v, atol=1e-14)
    d = flow_from_time(linear_field(A), 0.3, pts, [0.3, 1.0], FINE)
    np.testing.assert_allclose(d.final(), pts @ expm(0.7 * A).T, atol=1e-10)
    with pytest.raises(DomainError):
        flow_from_time(linear_field(A), 1.5, pts, [1.5, 2.0], FINE)
    with pytest.raises(ConfigurationError):
        flow_from_time(linear_field(A), 0.3, pts, [0.2, 1.0], FINE)


def test_semigroup_discrepancy_examples():
    assert semigroup_discrepancy(linear_field(A), 0.5, 0.5, 1.0, n_particles=200) == 0.0
    assert semigroup_discrepancy(constant_field([1.0, 2.0]), 0.0, 0.3, 1.0, n_particles=500) \
        <= 1e-10
    nil = linear_field([[0.0, 1.0], [0.0, 0.0]])
    assert semigroup_discrepancy(nil, 0.0, 0.5, 1.0, n_particles=500, steps=4) <= 1e-14
    with pytest.raises(DomainError):
        semigroup_discrepancy(nil, 0.6, 0.5, 1.0)


def test_semigroup_discrepancy_fourth_order():
    f = linear_field(A)
    pts = sample_initial_points(2, 500, 7)
    d = [semigroup_discrepancy(f, 0.0, 0.5, 1.0, steps=n, points=pts) for n in (4, 8, 16, 32)]
    rates = [math.log2(a / b) for a, b in zip(d, d[1:])]
    assert all(abs(r - 4.0) <= 0.3 for r in rates)


def test_rotated_flow_examples():
    pts = sample_initial_points(2, 200, 5)
    f = default_field("gradient_perturbation")
    zero = RotationGroup(np.zeros((2, 2)))
    a = rotated_flow_solve(f, zero, pts, GRID, FINE)
    b = integrate_flow(f, pts, GRID, FINE)
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-15)
    G = RotationGroup.planar(2)
    c = rotated_flow_solve(constant_field([0.0, 0.0]), G, pts, GRID, FINE)
    for i, t in enumerate(GRID):
        np.testing.assert_allclose(c.positions[:, i], pts @ G(t).T, atol=1e-14)
    assert np.max(c.duhamel_residual) <= 1e-14


def test_rotated_flow_constant_field_closed_form():
    pts = sample_initial_points(2, 100, 6)
    v = np.array([1.0, 0.5])
    G = RotationGroup.planar(2)
    grid = np.linspace(0, 1, 101)
    c = rotated_flow_solve(constant_field(v), G, pts, grid, FINE)
    t = 1.0
    # int_0^t Q_u du for the unit planar generator
    S = np.array([[math.sin(t), math.cos(t) - 1], [1 - math.cos(t), math.sin(t)]])
    np.testing.assert_allclose(c.final(), pts @ G(t).T + S @ v, atol=1e-10)
    assert np.max(c.duhamel_residual) <= 1e-6


def test_rotated_flow_matches_direct_integration():
    f = default_field("gradient_perturbation")
    G = RotationGroup.planar(2, 0.8)
    L = G.generator
    direct_field = FieldSpec(2, lambda t, X: X @ L.T + f.value(t, X))
    pts = sample_initial_points(2, 200, 9)
    grid = np.linspace(0, 1, 101)
    r = rotated_flow_solve(f, G, pts, grid, FINE)
    d = integrate_flow(direct_field, pts, grid, IntegratorOptions(max_step=2.5e-3))
    np.testing.assert_allclose(r.positions, d.positions, atol=1e-8)
    assert np.max(r.duhamel_residual) <= 1e-6


@pytest.mark.parametrize("kind", ["linear", "rotation", "gradient_perturbation", "coupled",
                                  "product"])
def test_finite_difference_jacobian_determinant(kind):
    f = default_field(kind)
    for x in sample_initial_points(2, 5, 11):
        det, logj = flow_jacobian_fd(f, x, [0.0, 1.0], FINE)
        assert det == pytest.approx(math.exp(logj), rel=1e-2)


def test_blow_up_freezes_particles():
    f = FieldSpec(1, lambda t, X: X ** 2, divergence=lambda t, X: 2 * X[:, 0])
    pts = np.array([[0.5], [2.0], [-1.0]])  # x = 2 blows up at t = 0.5
    with np.errstate(all="ignore"):
        b = integrate_flow(f, pts, GRID, IntegratorOptions(max_step=1e-3, r_max=1e3))
    assert b.alive.tolist() == [True, False, True]
    np.testing.assert_allclose(b.final()[[0, 2], 0], [0.5 / (1 - 0.5), -1.0 / 2.0], rtol=1e-8)
    assert np.all(np.isfinite(b.positions))
    with pytest.warns(RuntimeWarning):
        density_lr_norm(b, 2.0)


def test_non_finite_field_marks_particles_dead():
    f = FieldSpec(1, lambda t, X: np.where(X > 1.0, np.nan, 1.0))
    b = integrate_flow(f, np.array([[0.0], [0.95]]), [0.0, 0.5], FINE)
    assert b.alive.tolist() == [True, False]


def test_all_dead_is_an_error():
    f = FieldSpec(1, lambda t, X: np.full_like(X, np.nan))
    b = integrate_flow(f, np.array([[0.0]]), [0.0, 0.1], FINE)
    with pytest.raises(DomainError):
        density_lr_norm(b, 1.0)


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        integrate_flow(linear_field(A), np.zeros((1, 2)), [0.0, 0.5, 0.5])
    with pytest.raises(ConfigurationError):
        integrate_flow(linear_field(A), np.zeros((1, 3)), [0.0, 1.0])


def test_trajectory_csv(tmp_path):
    pts = sample_initial_points(2, 3, 0)
    b = integrate_flow(linear_field(A), pts, [0.0, 0.5, 1.0], FINE)
    path = tmp_path / "traj.csv"
    b.to_csv(path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode("utf-8").splitlines()))
    assert rows[0] == ["particle_id", "t", "x_1", "x_2", "log_jacobian", "log_density", "alive"]
    assert len(rows) == 1 + 3 * 3
    # 17 significant digits round-trip every double
    assert float(rows[1 + 3 * 1 + 2][2]) == b.positions[1, 2, 0]
    assert float(rows[-1][5]) == b.log_density[2, 2]


def test_dimension_consistency():
    gaps = dimension_consistency(lambda n: product_field(n), [1, 2, 3], 500, 0, GRID, FINE)
    assert gaps == [0.0, 0.0, 0.0]
    gaps = dimension_consistency(lambda n: coupled_field(n), [1, 2, 3, 4], 500, 0, GRID, FINE)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_stability_low_regularity_decreasing():
    pts = sample_initial_points(2, 100, 1)
    m = stability_metric(default_field("low_regularity"), [4, 16, 64], pts, GRID,
                         IntegratorOptions(max_step=0.05))
    assert m[0] > m[1] > m[2] > 0


@pytest.mark.parametrize("kind", ["linear", "rotation"])
def test_stability_first_order_on_smooth_fields(kind):
    pts = sample_initial_points(2, 100, 2)
    m = stability_metric(default_field(kind), [16, 32, 64], pts, GRID,
                         IntegratorOptions(max_step=0.05))
    for a, b in zip(m, m[1:]):
        assert b / a == pytest.approx(0.5, abs=0.05)


def test_stability_constant_field_is_exact():
    pts = sample_initial_points(2, 100, 2)
    m = stability_metric(constant_field([1.0, -1.0]), [4, 64], pts, GRID, FINE)
    assert max(m) <= 1e-3 and max(m) <= 1e-12


def test_step_refinement_converges_to_one_flow():
    # numerical counterpart of uniqueness: different steps, same limit
    f = default_field("gradient_perturbation")
    pts = sample_initial_points(2, 300, 12)
    coarse = integrate_flow(f, pts, GRID, IntegratorOptions(max_step=0.05)).final()
    fine = integrate_flow(f, pts, GRID, IntegratorOptions(max_step=0.0125)).final()
    finer = integrate_flow(f, pts, GRID, IntegratorOptions(max_step=0.003125)).final()
    assert np.max(np.abs(fine - finer)) < np.max(np.abs(coarse - finer)) / 100
    assert np.max(np.abs(fine - finer)) <= 1e-7


def test_independent_seeds_give_the_same_density_norm():
    f = default_field("gradient_perturbation")
    a = density_lr_norm(integrate_flow(f, None, GRID, FINE, n_particles=20_000, seed=1), 2.0)
    b = density_lr_norm(integrate_flow(f, None, GRID, FINE, n_particles=20_000, seed=2), 2.0)
    assert abs(a[0] - b[0]) <= 3 * math.hypot(a[1], b[1])
