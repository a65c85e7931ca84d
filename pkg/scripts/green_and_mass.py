"""Green function on the perturbed half box, and mass fluxes of the Schwarzschild fixtures."""

import numpy as np

from yamabe_lab.cli import _perturbed
from yamabe_lab.geometry import Grid, flat_half_box, schwarzschild_chart
from yamabe_lab.greenmass import (adm_mass, assemble_green, boundary_mass, bump_test_functions,
                                  flux_I, kelvin_green, reproducing_check)


def main():
    ch = _perturbed(flat_half_box(3), 0.2)
    g = Grid.uniform_grid(ch, [13, 13, 7])
    t = assemble_green(ch, g, np.zeros(3))
    print(f"Green: kind={t.kind} tag={t.tag} min_G={t.checks['min_G']:.4g} "
          f"B_gG={t.checks['bg_residual']:.2e}")
    for i, phi in enumerate(bump_test_functions(ch)):
        r = reproducing_check(t, ch, g, phi)
        print(f"  test function {i}: lhs={r.lhs:.8g} rhs={r.rhs:.8g} rel={r.rel_err:.2e}")
    radii = [20, 40, 80, 160]
    m = adm_mass(schwarzschild_chart(3, 1.0, r_out=400), radii)
    print("ADM flux", np.round(m.flux, 6), f"-> {m.extrapolated:.8g} (16 pi = {16 * np.pi:.8g})")
    b = boundary_mass(schwarzschild_chart(3, 1.0, r_out=400, half=True), radii)
    print("boundary flux", np.round(b.flux, 6), f"-> {b.extrapolated:.8g}")
    G = kelvin_green(lambda y: 1 + 1 / (2 * np.linalg.norm(y, axis=-1)), 3)
    f = flux_I(flat_half_box(3), G, [0.05, 0.1, 0.2, 0.4])
    print("flux_I", np.round(f.I, 6), f"-> {f.extrapolated:.8g}")


if __name__ == "__main__":
    main()
