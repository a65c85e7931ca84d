"""Glued bubble energies against the sharp constants, and the kind B deficit scaling."""

import argparse

import numpy as np

from yamabe_lab.bubbles import BubbleSpec, flux_sweep, kind_b_sweep, model_energy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rho", type=float, default=0.5)
    ap.add_argument("--dims", type=int, nargs="+", default=[3, 4, 5])
    a = ap.parse_args()
    for n in a.dims:
        for kind in ("A", "C"):
            for eps in (0.04, 0.02, 0.01, 0.005):
                be = model_energy(BubbleSpec(kind, np.zeros(n), eps, a.rho))
                print(f"n={n} kind={kind} eps={eps:<6} E={be.report.E:.10g} rel_gap={be.gap / be.sharp:+.2e}")
        _, slope, ct = kind_b_sweep(n, a.rho, np.geomspace(0.01, 0.1, 5))
        print(f"n={n} kind B deficit slope {slope:.3f} (expect {n - 2}), c~={ct:.3g}")
        for delta in (0.05, 0.1, 0.2):
            rows, s = flux_sweep(n, delta, a.rho, np.geomspace(0.01, 0.1, 5))
            sc = [r["scaled"] for r in rows]
            print(f"n={n} delta={delta} flux slope {s:.3f}, scaled flux in [{min(sc):.3g}, {max(sc):.3g}]")


if __name__ == "__main__":
    main()
