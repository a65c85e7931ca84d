import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.functionals import (bubble_lq_integral, energy, estimate_Q, q_hemisphere,
                                    y_sphere)
from yamabe_lab.geometry import Grid, flat_box, kappa_half_box

# frozen from tests/oracles/analysis_oracle.py (mpmath): int_0^inf (1+r^2)^{-n} r^{n-1} dr
LQ = {3: 0.1963495408493620774, 4: 0.083333333333333333333,
      5: 0.036815538909255389513, 6: 0.016666666666666666667}


@pytest.mark.parametrize("n", sorted(LQ))
def test_bubble_lq_integral_oracle(n):
    assert bubble_lq_integral(n) == pytest.approx(LQ[n], rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 6), st.floats(1e-3, 10.0))
def test_bubble_integral_scale_free(n, eps):
    assert bubble_lq_integral(n, eps) == pytest.approx(LQ[n], rel=1e-10)


def test_y_sphere_three():
    assert y_sphere(3) == pytest.approx(6 * (2 * np.pi ** 2) ** (2 / 3), rel=1e-12)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_sphere_hemisphere_ratio(n):
    assert y_sphere(n) / q_hemisphere(n) == pytest.approx(2 ** (2 / n), rel=1e-12)


def test_small_dimension_rejected():
    with pytest.raises(ValueError):
        y_sphere(2)


def test_energy_of_constant_on_flat_box_is_zero():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 7)
    rep = energy(ch, g, np.ones(g.shape))
    assert abs(rep.E) < 1e-12 and rep.denom_F == pytest.approx(1.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10.0))
def test_energy_scale_invariant(c):
    ch = kappa_half_box(3, 0.1)
    g = Grid.uniform_grid(ch, 6)
    u = 1 + 0.3 * g.points()[..., 2]
    assert energy(ch, g, c * u).E == pytest.approx(energy(ch, g, u).E, rel=1e-10)


def test_estimate_Q_flat_box():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 8)
    b = estimate_Q(ch, g, restarts=2, iters=100)
    assert b.lower <= b.upper + 1e-12
    assert abs(b.upper) < 1e-8 and b.upper <= min(b.restart_values) + 1e-15
