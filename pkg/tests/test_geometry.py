import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.geometry import (ARTIFICIAL, BOUNDARY, INTERIOR, Chart, DomainError, Grid,
                                 boundary_forms, christoffel, flat_box, flat_half_box,
                                 hemisphere_chart, integrate, kappa_half_box, make_chart,
                                 metric_from_function, scalar_curvature, sphere_chart,
                                 weyl_tensor, z_set_scan)

# frozen from tests/oracles/geometry_oracle.py (sympy)
GAMMA_000 = 0.5
WEYL_NORM = 0.3656968707934096
WEYL_R = -0.6334055603831366
WEYL_PT = np.array([0.3, 0.2, 0.1, 0.4])


def _diag_metric(x):
    x = np.asarray(x)
    g = np.zeros(x.shape[:-1] + (4, 4))
    g[..., 0, 0] = 1 + x[..., 0] ** 2
    g[..., 1, 1] = 1 + x[..., 0] * x[..., 1] / 2
    g[..., 2, 2] = 1
    g[..., 3, 3] = 1 + x[..., 2] ** 2 / 3
    return g


def test_christoffel_oracle():
    def m(x):
        g = np.broadcast_to(np.eye(3), np.shape(x)[:-1] + (3, 3)).copy()
        g[..., 0, 0] = 1 + np.asarray(x)[..., 0] ** 2
        return g
    ch = metric_from_function(3, [-2] * 3, [2] * 3, m)
    gam = christoffel(ch, np.array([1.0, 0, 0]))
    assert gam[0, 0, 0] == pytest.approx(GAMMA_000, abs=1e-10)
    gam[0, 0, 0] = 0
    assert np.max(np.abs(gam)) < 1e-10


def test_weyl_and_scalar_oracle():
    ch = metric_from_function(4, [-1] * 4, [1] * 4, _diag_metric)
    _, nrm = weyl_tensor(ch, WEYL_PT)
    assert nrm == pytest.approx(WEYL_NORM, rel=1e-7)
    assert scalar_curvature(ch, WEYL_PT) == pytest.approx(WEYL_R, rel=1e-7)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_round_sphere_curvature(n):
    ch = sphere_chart(n)
    x = np.linspace(-0.3, 0.3, n)
    assert scalar_curvature(ch, x) == pytest.approx(n * (n - 1), rel=1e-8)
    if n > 3:
        assert weyl_tensor(ch, x)[1] < 1e-6


def test_flat_charts_vanish():
    for ch in (flat_box(3), flat_half_box(4)):
        x = 0.5 * (ch.lo + ch.hi)
        # stencil weights sum to zero only up to rounding, amplified by 1/h^2
        assert abs(scalar_curvature(ch, x)) < 1e-8
        assert np.max(np.abs(christoffel(ch, x))) < 1e-12


@pytest.mark.parametrize("n", [3, 4])
def test_hemisphere_boundary_totally_geodesic(n):
    ch = hemisphere_chart(n)
    x = np.r_[np.full(n - 1, 0.2), 0.0]
    bf = boundary_forms(ch, x)
    assert abs(bf.H) < 1e-9 and bf.pi_norm < 1e-9


@given(st.floats(-0.3, 0.3), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
@settings(max_examples=20, deadline=None)
def test_kappa_half_box_mean_curvature(kappa, a, b):
    ch = kappa_half_box(3, kappa=kappa)
    bf = boundary_forms(ch, np.array([a, b, 0.0]))
    assert bf.H == pytest.approx(-2 * kappa, abs=1e-9)
    assert bf.pi_norm < 1e-9


def test_boundary_forms_off_boundary():
    with pytest.raises(DomainError):
        boundary_forms(flat_half_box(3), np.array([0.0, 0.0, 0.5]))


@given(st.floats(0.3, 3.0))
@settings(max_examples=20, deadline=None)
def test_scalar_curvature_scaling(lam):
    # R(lam^2 g) = R(g) / lam^2
    ch = sphere_chart(3)
    scaled = metric_from_function(3, ch.lo, ch.hi, lambda x: lam ** 2 * ch.metric(x))
    x = np.array([0.1, -0.2, 0.3])
    assert scalar_curvature(scaled, x) == pytest.approx(6 / lam ** 2, rel=1e-7)


def test_z_set_scan_flat_is_zero():
    rows = z_set_scan(flat_half_box(4), np.zeros(4), [0.1, 0.2])
    assert all(r[1] == 0 and r[2] == 0 for r in rows)


def test_grid_classify_and_integrate():
    ch = flat_half_box(3, 1.0, 1.0)
    g = Grid.uniform_grid(ch, [5, 5, 4])
    k = g.classify()
    assert k[2, 2, 0] == BOUNDARY and k[2, 2, 2] == INTERIOR and k[0, 2, 2] == ARTIFICIAL
    assert k[0, 2, 0] == ARTIFICIAL
    assert integrate(np.ones(g.shape), ch, g) == pytest.approx(4.0)
    assert integrate(np.ones(g.shape), ch, g, "boundary") == pytest.approx(4.0)
    with pytest.raises(ValueError):
        integrate(np.ones((2, 2, 2)), ch, g)


def test_chart_validation():
    with pytest.raises(ValueError):
        flat_box(2)
    with pytest.raises(ValueError):
        Chart(3, [0, 0, 0], [1, 1, 0], lambda x: x)
    with pytest.raises(KeyError):
        make_chart("torus")
    assert make_chart("flat_half_box", n=3).face_of([0.1, 0.1, 0.0]) == (2, 0)
