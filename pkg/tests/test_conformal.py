import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.conformal import (BoundaryField, ConformalOperator, ConventionError,
                                  PositivityError, SolvabilityError, apply_B, apply_L,
                                  apply_Lh, assemble_system, c_n, coercivity_probe,
                                  conformal_mean, conformal_scalar, convention_factor,
                                  covariance_defect, quadratic_form, solve_bvp, system_residual)
from yamabe_lab.geometry import (Field, Grid, flat_box, flat_half_box, hemisphere_chart,
                                 kappa_half_box, sphere_chart)


def _grid(ch, k):
    return Grid.uniform_grid(ch, k)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_convention_factors(n):
    assert c_n(n) == 4 * (n - 1) / (n - 2)
    assert convention_factor(n, "L") == c_n(n)
    assert convention_factor(n, "B") == c_n(n) / 2


def test_conventions_differ_by_exact_factor():
    ch = kappa_half_box(3, 0.2, 0.5, 0.5)
    g = _grid(ch, 9)
    X = g.points()
    z = 1 + 0.3 * X[..., 0] * X[..., 2]
    e = ConformalOperator(ch, g, "energy")
    b = e.converted("appendixB")
    assert np.allclose(apply_L(e, z).values, c_n(3) * apply_L(b, z).values, rtol=1e-13, atol=1e-12)
    for f, v in apply_B(e, z).faces.items():
        assert np.allclose(v, c_n(3) / 2 * apply_B(b, z).faces[f], rtol=1e-13, atol=1e-12)


def test_convention_mismatch_raises():
    ch = flat_box(3)
    op = ConformalOperator(ch, _grid(ch, 5), "energy")
    with pytest.raises(ConventionError):
        apply_L(op, np.ones(op.grid.shape), expect="appendixB")
    with pytest.raises(ConventionError):
        ConformalOperator(ch, op.grid, "other")


def test_conformal_scalar_recovers_sphere():
    # u^{4} delta with the stereographic factor is the round metric (n = 3)
    ch = flat_box(3, -0.5, 0.5)
    g = _grid(ch, 33)
    w = sphere_chart(3).conformal
    R = conformal_scalar(ch, Field.from_function(w, g)).values
    assert np.max(np.abs(R[4:-4, 4:-4, 4:-4] - 6)) < 5e-3


def test_conformal_mean_hemisphere_minimal():
    ch = flat_half_box(3, 0.5, 0.5)
    g = _grid(ch, 33)
    w = hemisphere_chart(3).conformal
    H = conformal_mean(ch, Field.from_function(w, g)).faces[(2, 0)]
    assert np.max(np.abs(H)) < 1e-3


def test_positivity_error():
    ch = flat_box(3)
    g = _grid(ch, 5)
    u = np.ones(g.shape)
    u[2, 2, 2] = -1
    with pytest.raises(PositivityError):
        conformal_scalar(ch, Field(u, g))


def test_system_symmetric():
    ch = kappa_half_box(3, 0.1)
    s = assemble_system(ConformalOperator(ch, _grid(ch, 7)))
    assert abs(s.A - s.A.T).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_quadratic_form_matches_matrix(seed):
    ch = kappa_half_box(3, 0.15)
    op = ConformalOperator(ch, _grid(ch, 6))
    s = assemble_system(op)
    u = np.random.default_rng(seed).uniform(0.5, 1.5, op.grid.shape)
    assert quadratic_form(op, u) == pytest.approx(-float(u.ravel() @ (s.A @ u.ravel())), rel=1e-10)


def test_apply_Lh_on_constant_is_curvature_term():
    ch = kappa_half_box(3, 0.1)
    op = ConformalOperator(ch, _grid(ch, 7))
    kind = op.grid.classify()
    Lu = apply_Lh(op, np.ones(op.grid.shape))
    assert np.allclose(Lu[kind == 0], -op.R[kind == 0], atol=1e-9)


def test_flat_neumann_not_coercive():
    ch = flat_box(3)
    op = ConformalOperator(ch, _grid(ch, 6))
    assert abs(coercivity_probe(op)) < 1e-10
    with pytest.raises(SolvabilityError):
        solve_bvp(op, np.ones(op.grid.shape))


def test_solve_bvp_residual_and_manufactured_solution():
    ch = flat_half_box(3, 1.0, 1.0)
    errs = []
    for k in (9, 17):
        g = _grid(ch, k)
        op = ConformalOperator(ch, g, "appendixB")
        X = g.points()
        exact = np.cos(X[..., 0]) * np.cosh(X[..., 2] - 1) + X[..., 1]
        # Lap exact = 0; d_eta exact = d_{x2} exact at x2 = 0
        fbar = {(2, 0): np.cos(X[:, :, 0, 0]) * np.sinh(-1.0)}
        u = solve_bvp(op, np.zeros(g.shape), BoundaryField(fbar), dirichlet=exact)
        ri, rb = system_residual(op, u, np.zeros(g.shape), BoundaryField(fbar))
        assert ri < 1e-7 and rb < 1e-7
        errs.append(np.max(np.abs(u.values - exact)))
    assert errs[1] < errs[0] / 3


@pytest.mark.parametrize("ch", [flat_half_box(3, 0.5, 0.5), kappa_half_box(3, 0.1, 0.5, 0.5)],
                         ids=["flat", "kappa"])
def test_covariance_defect_shrinks(ch):
    u = lambda x: 1 + 0.1 * x[..., 0] + 0.1 * x[..., 2] ** 2 + 0.1 * x[..., 2]
    z = lambda x: 1 + 0.2 * x[..., 0] * x[..., 1] + 0.3 * x[..., 2]
    d1 = covariance_defect(ch, _grid(ch, 9), u, z)
    d2 = covariance_defect(ch, _grid(ch, 17), u, z)
    assert d2.interior < d1.interior / 3 and d2.boundary < d1.boundary / 3
