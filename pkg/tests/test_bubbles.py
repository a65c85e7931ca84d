import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.bubbles import (BubbleSpec, ConstraintError, FlatGreen, GreenMissingError,
                                PolyVector, assemble_test_function, boundary_flux,
                                boundary_residual_profile, bubble_jet, chi_rho, flux_sweep,
                                galerkin_V, glued_jet, kind_b_sweep, model_energy,
                                phi_from_V, phi_jet, propo5_constant, residual_interior,
                                strain_rhs, sweep_row, u_epsilon, v_basis)
from yamabe_lab.conformal import c_n
from yamabe_lab.geometry import Grid, flat_box, flat_half_box, kappa_half_box
from yamabe_lab.polytensor import random_admissible

pts3 = st.lists(st.floats(-2, 2), min_size=3, max_size=3)


@settings(max_examples=40, deadline=None)
@given(pts3, st.floats(0.05, 2.0))
def test_bubble_solves_critical_equation(y, eps):
    n = 3
    J = bubble_jet(np.array(y), eps, n)
    res = c_n(n) * J.lap + 4 * n * (n - 1) * J.v ** ((n + 2) / (n - 2))
    assert abs(res[0]) <= 1e-9 * max(1.0, abs(c_n(n) * J.lap[0]))
    assert J.v[0] == pytest.approx(u_epsilon(np.array(y), eps, n), rel=1e-14)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_bubble_jet_gradient_fd(n):
    y = np.linspace(0.1, 0.4, n)
    J = bubble_jet(y, 0.3, n)
    h = 1e-6
    for a in range(n):
        e = np.eye(n)[a] * h
        fd = (u_epsilon(y + e, 0.3, n) - u_epsilon(y - e, 0.3, n)) / (2 * h)
        assert J.g[0, a] == pytest.approx(fd, rel=1e-7)
    assert J.lap[0] == pytest.approx(np.trace(J.h[0]), rel=1e-12)


def test_chi_rho_profile():
    rho = 0.3
    assert chi_rho(np.array([0, 0, 4 * rho / 3]), rho) == 1.0
    assert chi_rho(np.array([0, 0, 5 * rho / 3]), rho) == 0.0
    r = np.linspace(0, 2 * rho, 50)
    c = chi_rho(np.stack([r, 0 * r, 0 * r], axis=1), rho)
    assert np.all(np.diff(c) <= 0)


def test_flat_green_image_is_harmonic_and_even():
    G = FlatGreen.for_kind("B", 3, 0.2)
    y = np.array([[0.3, 0.1, 0.05]])
    h = 1e-4
    lap = sum((G(y + h * e) - 2 * G(y) + G(y - h * e)) / h ** 2 for e in np.eye(3))
    assert abs(lap[0]) < 1e-5
    # symmetric about the plane y_n = -delta
    assert G(np.array([[0.3, 0.1, -0.2 + 0.07]]))[0] == pytest.approx(
        G(np.array([[0.3, 0.1, -0.2 - 0.07]]))[0], rel=1e-14)


def test_spec_validation():
    with pytest.raises(ValueError):
        BubbleSpec("D", np.zeros(3), 0.1, 0.5)
    with pytest.raises(ValueError):
        BubbleSpec("C", np.zeros(3), 0.3, 0.5)
    with pytest.raises(ValueError):
        BubbleSpec("B", np.zeros(3), 0.01, 0.5, delta=0.0)
    with pytest.raises(ValueError):
        BubbleSpec("B", np.zeros(3), 0.01, 0.5, delta=0.3, C_B=1.0)


def test_glued_profile_plateau_and_far_field():
    s = BubbleSpec("C", np.zeros(3), 0.05, 0.3)
    y = np.array([[0.1, 0, 0], [1.0, 0, 0]])
    J = glued_jet(s, y)
    assert J.v[0] == pytest.approx(u_epsilon(y[0], 0.05, 3), rel=1e-14)
    assert J.v[1] == pytest.approx(0.05 ** 0.5 / 1.0, rel=1e-14)


def test_kind_a_boundary_residual_vanishes():
    s = BubbleSpec("A", np.zeros(3), 0.02, 0.3)
    xb = np.stack([np.linspace(0, 0.8, 40), np.zeros(40)], axis=1)
    assert np.max(np.abs(boundary_residual_profile(s, xb))) < 1e-12


@pytest.mark.parametrize("kind", ["A", "C"])
@pytest.mark.parametrize("n", [3, 4])
def test_model_energy_gap_small(kind, n):
    be = model_energy(BubbleSpec(kind, np.zeros(n), 0.005, 0.5))
    assert abs(be.gap) / be.sharp < 1e-2


def test_kind_b_deficit_scaling():
    _, slope, ct = kind_b_sweep(3, 0.5, np.geomspace(0.01, 0.1, 4))
    assert abs(slope - 1) < 0.15 and ct > 0


def test_boundary_flux_scaling():
    rows, slope = flux_sweep(3, 0.1, 0.5, np.geomspace(0.01, 0.1, 4))
    assert abs(slope - 1) < 0.1
    assert all(r["flux"] > 0 for r in rows)
    with pytest.raises(ValueError):
        boundary_flux(0.2, 0.1, 0.5, 3)


def test_test_function_on_grid_matches_model():
    ch = flat_half_box(3, 1.0, 1.0)
    g = Grid.uniform_grid(ch, 9)
    s = BubbleSpec("A", np.zeros(3), 0.1, 0.3)
    u = assemble_test_function(s, ch, g)
    X = g.points().reshape(-1, 3)
    assert np.allclose(u.values.ravel(), glued_jet(s, X).v)
    res = residual_interior(s, ch, g, method="analytic")
    assert np.isfinite(res.lq_norm)


def test_green_required_on_curved_chart():
    ch = kappa_half_box(3, 0.1)
    with pytest.raises(GreenMissingError):
        assemble_test_function(BubbleSpec("A", np.zeros(3), 0.05, 0.2), ch, Grid.uniform_grid(ch, 5))


@pytest.mark.parametrize("n", [4, 5, 6])
def test_phi_equation_for_strain_data(n):
    rng = np.random.default_rng(n)
    V = PolyVector(n, 2, sum(rng.normal() * b.coef for b in v_basis(n, 2)))
    assert V.boundary_violation() == 0
    y = rng.uniform(-1, 1, (20, n))
    J = phi_jet(y, 0.3, V)
    U = u_epsilon(y, 0.3, n)
    res = J.lap + n * (n + 2) * U ** (4 / (n - 2)) * J.v - strain_rhs(y, 0.3, V)
    assert np.max(np.abs(res)) < 1e-10 * max(1.0, np.max(np.abs(J.lap)))


def test_phi_from_V_rejects_bad_boundary_rows():
    n = 4
    H = random_admissible(n, np.random.default_rng(0))
    c = np.zeros((n, 15))
    c[n - 1, 1] = 1.0  # V_n with a tangential linear monomial
    with pytest.raises(ConstraintError):
        phi_from_V(PolyVector(n, 2, c), 0.1, 0.5, H)


def test_weighted_ratio_positive():
    H = random_admissible(4, np.random.default_rng(2))
    V = galerkin_V(0.05, 0.5, H, r_max_factor=10.0)
    wr = propo5_constant(4, 0.05, 0.5, H, V)
    assert wr.q_integral > 0 and 0 < wr.lam < np.inf


def test_sweep_row_columns():
    row = sweep_row(BubbleSpec("C", np.zeros(3), 0.01, 0.5), samples=20)
    assert set(row) >= {"kind", "eps", "gap", "res_int_norm"}
