"""Two-bubble decomposition fit and the low-mode family u_z around a constant limit."""

import numpy as np

from yamabe_lab.blowup import (FitConfig, UzProblem, detect_peaks, eigenbasis, fit_bubbles,
                               low_modes, solve_uz, split_vw)
from yamabe_lab.bubbles import BubbleSpec, assemble_test_function
from yamabe_lab.geometry import Field, Grid, flat_box


def main():
    ch = flat_box(3)
    g = Grid.uniform_grid(ch, 41)
    cfg = FitConfig(rho=0.12)
    truth = [(np.array([0.3, 0.32, 0.5]), 0.03), (np.array([0.71, 0.69, 0.5]), 0.04)]
    u = Field(sum(assemble_test_function(BubbleSpec("C", x, e, cfg.rho), ch, g).values
                  for x, e in truth), g)
    peaks = detect_peaks(u, ch)
    print("peaks:", [(np.round(x, 4).tolist(), round(e, 4)) for x, e in peaks])
    fit = fit_bubbles(u, ch, 2, peaks, cfg)
    for r in fit.rows():
        print("fit:", r)
    sp = split_vw(fit, u, ch)
    print(f"residual energy {fit.w_energy:.2e}, separation {fit.separation:.4g}, "
          f"E(v)={sp.E_v:.6g} <= {sp.bound:.6g}: {sp.holds}")

    cu = flat_box(3, 0.0, 4.0)
    gu = Grid.uniform_grid(cu, 13)
    one = Field(np.ones(gu.shape), gu)
    B = eigenbasis(one, cu, 8, R0=2.0)
    A = low_modes(B, 2.0, 3)
    print("eigenvalues", np.round(B.lam, 6), "low modes", A)
    P = UzProblem(one, cu, 2.0, B, A, R0=2.0)
    for s in (0.0, 0.02, 0.05):
        z = np.zeros(len(A))
        z[1] = s
        r = solve_uz(P, z)
        print(f"z_1={s}: newton its {r.iterations}, constraint {r.constraint_residual:.1e}, "
              f"equation {r.equation_residual:.1e}, min u {r.u.values.min():.6f}")


if __name__ == "__main__":
    main()
