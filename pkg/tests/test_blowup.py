import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.blowup import (FitConfig, UzProblem, _solve_alpha, detect_peaks, eigenbasis,
                               fit_bubbles, low_modes, separation, solve_uz, split_vw, zone)
from yamabe_lab.bubbles import BubbleSpec, assemble_test_function, u_epsilon
from yamabe_lab.conformal import c_n
from yamabe_lab.geometry import Field, Grid, flat_box, flat_half_box


def _neumann_oracle(n, N, L, R0, count):
    """Separable eigenvalues of the trapezoid-weighted Neumann stencil on [0, L]^n."""
    h = L / (N - 1)
    mu1 = [2 / h ** 2 * (1 - np.cos(k * np.pi / (N - 1))) for k in range(N)]
    vals = sorted(c_n(n) * sum(mu1[k] for k in ks) + R0 for ks in itertools.product(range(4), repeat=n))
    return np.array(vals[:count])


@pytest.fixture(scope="module")
def single():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 33)
    cfg = FitConfig(rho=0.3)
    x0 = np.array([0.503, 0.497, 0.51])
    u = assemble_test_function(BubbleSpec("C", x0, 0.08, cfg.rho), ch, g)
    peaks = detect_peaks(u, ch)
    fit = fit_bubbles(u, ch, 1, peaks, cfg)
    return ch, u, x0, fit


@pytest.fixture(scope="module")
def uz_setup():
    ch = flat_box(3, 0.0, 4.0)
    g = Grid.uniform_grid(ch, 13)
    u = Field(np.ones(g.shape), g)
    B = eigenbasis(u, ch, 8, R0=2.0)
    A = low_modes(B, 2.0, 3)
    return ch, u, B, A, UzProblem(u, ch, 2.0, B, A, R0=2.0)


# zoning

def test_zone_classification():
    ch = flat_half_box(3)
    assert zone(ch, [0, 0, 0], 0.02) == "A"
    assert zone(ch, [0, 0, 0.02], 0.02) == "B"
    assert zone(ch, [0, 0, 0.2], 0.02) == "C"
    assert zone(flat_box(3, physical=()), [0.5, 0.5, 0.0], 0.02) == "C"


def test_zone_tie_goes_to_b():
    assert zone(flat_half_box(3), [0, 0, 0.03], 0.02) == "B"
    assert zone(flat_half_box(3), [0, 0, 0.0300001], 0.02) == "C"


# peaks

def test_detect_peaks_scale_and_center():
    # the estimate measures heights above min(u), so keep the far-field floor small
    ch = flat_box(3, -2.0, 2.0)
    g = Grid.uniform_grid(ch, 81)
    u = Field(u_epsilon(g.points(), 0.1, 3), g)
    (x, eps), = detect_peaks(u, ch)
    assert np.allclose(x, 0.0)
    assert eps == pytest.approx(0.1, rel=0.05)


def test_detect_peaks_flat_and_negative():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 5)
    assert detect_peaks(Field(np.ones(g.shape), g), ch) == []
    with pytest.raises(ValueError):
        detect_peaks(Field(-np.ones(g.shape), g), ch)


# separation and alpha

def test_separation_formula():
    x = [np.zeros(3), np.array([0.3, 0.4, 0.0])]
    assert separation(x, [0.1, 0.2]) == pytest.approx(0.5 + 2 + 0.25 / 0.02)
    assert separation([np.zeros(3)], [0.1]) == np.inf


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0, 2))
def test_separation_symmetric_and_at_least_two(e1, e2, d):
    x = [np.zeros(2), np.array([d, 0.0])]
    s = separation(x, [e1, e2])
    assert s == pytest.approx(separation(x[::-1], [e2, e1]))
    assert s >= 2 - 1e-12


def test_solve_alpha_respects_box():
    rng = np.random.default_rng(0)
    Phi = rng.standard_normal((40, 2))
    u = Phi @ np.array([3.0, 1.0])
    a = _solve_alpha(Phi, Phi, u, None, 0.5, 2.0)
    assert a[0] == pytest.approx(2.0)
    a2 = _solve_alpha(Phi, Phi, Phi @ np.array([1.2, 0.8]), None, 0.5, 2.0)
    assert np.allclose(a2, [1.2, 0.8])


# fit

def test_single_bubble_exact_recovery(single):
    _, _, x0, fit = single
    assert fit.kinds == ["C"]
    assert np.allclose(fit.x[0], x0, rtol=1e-6, atol=0)
    assert fit.eps[0] == pytest.approx(0.08, rel=1e-6)
    assert fit.alpha[0] == pytest.approx(1.0, rel=1e-6)
    assert fit.w_energy <= 1e-10
    assert not fit.projected


def test_fit_objective_non_increasing(single):
    tr = np.array(single[3].objective_trace)
    assert np.all(np.diff(tr) <= 0)
    assert tr[-1] <= single[3].initial_objective


def test_split_is_nodewise_identity(single):
    ch, u, _, fit = single
    sp = split_vw(fit, u, ch)
    assert np.max(np.abs(sp.v.values + sp.w.values - u.values)) <= 1e-14
    assert sp.holds


def test_fit_argument_errors(single):
    ch, u, _, _ = single
    with pytest.raises(ValueError):
        fit_bubbles(u, ch, 0, [])
    with pytest.raises(ValueError):
        fit_bubbles(u, ch, 2, [(np.full(3, 0.5), 0.08)])


# eigenbasis

def test_eigenbasis_matches_discrete_separable_oracle(uz_setup):
    _, _, B, _, _ = uz_setup
    assert np.allclose(B.lam, _neumann_oracle(3, 13, 4.0, 2.0, 8), rtol=1e-10)
    assert B.gram_error <= 1e-10
    assert np.all(B.residuals <= 1e-8)
    assert np.all(np.diff(B.lam) >= -1e-10)
    assert B.lam[-1] > B.lam[0]


def test_eigenbasis_sign_convention(uz_setup):
    _, _, B, _, _ = uz_setup
    assert np.dot(B.weight, B.psi[0]) > 0


def test_eigenbasis_errors():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 3)
    with pytest.raises(ValueError):
        eigenbasis(Field(np.ones(g.shape), g), ch, 28)
    with pytest.raises(ValueError):
        eigenbasis(Field(np.zeros(g.shape), g), ch, 2)


def test_low_modes_threshold(uz_setup):
    _, _, B, A, _ = uz_setup
    # (n+2)/(n-2) rbar = 10 keeps the constant mode and the three first harmonics
    assert A == [0, 1, 2, 3]
    thr = B.lam[1] * (3 - 2) / (3 + 2)
    assert 1 in low_modes(B, thr, 3)
    assert 1 not in low_modes(B, thr * (1 - 1e-9), 3)


# u_z

def test_uz_base_point(uz_setup):
    _, u, _, A, P = uz_setup
    r = solve_uz(P, np.zeros(len(A)))
    assert np.max(np.abs(r.u.values - u.values)) <= 1e-12


@pytest.mark.parametrize("a", [0, 1, 3])
def test_uz_constraint_and_linearization(uz_setup, a):
    _, _, B, A, P = uz_setup
    h = 1e-4
    z = np.zeros(len(A))
    z[a] = h
    rp, rm = solve_uz(P, z), solve_uz(P, -z)
    assert rp.constraint_residual <= 1e-10 and rm.constraint_residual <= 1e-10
    assert rp.equation_residual <= 1e-8
    assert np.all(rp.u.values > 0)
    d = (rp.u.values - rm.u.values).ravel() / (2 * h)
    psi = B.psi[A[a]]
    assert np.max(np.abs(d - psi)) <= 1e-4 * np.max(np.abs(psi))


def test_uz_argument_checks(uz_setup):
    _, _, _, A, P = uz_setup
    with pytest.raises(ValueError):
        solve_uz(P, np.zeros(len(A) + 1))
    with pytest.raises(ValueError):
        solve_uz(P, np.full(len(A), 0.1))
