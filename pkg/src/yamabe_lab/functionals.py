"""Energies E and F, bracketing of Q(M), and the sharp constants Q(S^n_+), Y(S^n)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import binom

from .conformal import ConformalOperator, assemble_system, coercivity_probe, quadratic_form
from .geometry import Chart, Field, Grid
from .quadrature import radial_rule, sphere_area


@dataclass
class EnergyReport:
    numerator: float
    denom_E: float
    denom_F: float
    E: float
    F: float

    @classmethod
    def from_parts(cls, num: float, lq: float, n: int) -> "EnergyReport":
        if lq <= 0:
            raise ZeroDivisionError("zero denominator")
        dE = lq ** ((n - 2) / n)
        return cls(num, dE, lq, num / dE, num / lq)


def energy(chart: Chart, grid: Grid, u, op: ConformalOperator | None = None) -> EnergyReport:
    """E(u) = [int c|du|^2 + R u^2 + int_bdry 2H u^2] / (int u^{2n/(n-2)})^{(n-2)/n}."""
    f = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
    op = op or ConformalOperator(chart, grid, "energy")
    if op.convention != "energy":
        op = op.converted("energy")
    s = assemble_system(op)
    n = chart.n
    num = quadratic_form(op, f)
    lq = float(np.dot(s.W, np.abs(f.ravel()) ** (2 * n / (n - 2))))
    return EnergyReport.from_parts(num, lq, n)


# ---------------------------------------------------------------------------
# sharp constants

def bubble_lq_integral(n: int, eps: float = 1.0, r_trunc: float = 40.0, order: int = 12) -> float:
    """int_0^inf U_eps^{2n/(n-2)} r^{n-1} dr: Gauss panels on [0, r_trunc*eps]
    plus the analytic tail series of eps^n (eps^2+r^2)^{-n} r^{n-1}."""
    R = r_trunc * eps
    r, w = radial_rule(eps, R, order=order, ratio=1.5)
    core = float(np.dot(w, eps ** n * (eps ** 2 + r ** 2) ** (-n) * r ** (n - 1)))
    tail = 0.0
    x = (eps / R) ** 2
    for k in range(60):
        term = (-1) ** k * binom(n + k - 1, k) * x ** k / (n + 2 * k)
        tail += term
        if abs(term) < 1e-18:
            break
    tail *= eps ** n * R ** (-n)
    return core + tail


def y_sphere(n: int, eps: float = 1.0) -> float:
    """Y(S^n) = 4n(n-1) (int_{R^n} U_eps^{2n/(n-2)})^{2/n}."""
    if n < 3:
        raise ValueError("n >= 3")
    return 4 * n * (n - 1) * (sphere_area(n) * bubble_lq_integral(n, eps)) ** (2 / n)


def q_hemisphere(n: int, eps: float = 1.0) -> float:
    """Q(S^n_+) = 4n(n-1) (int_{R^n_+} U_eps^{2n/(n-2)})^{2/n}."""
    if n < 3:
        raise ValueError("n >= 3")
    return 4 * n * (n - 1) * (0.5 * sphere_area(n) * bubble_lq_integral(n, eps)) ** (2 / n)


# ---------------------------------------------------------------------------
# Q(M) bracket

@dataclass
class QBracket:
    lower: float
    upper: float
    eigenvalue: float
    stagnated: bool
    trace: list = field(default_factory=list)
    restart_values: list = field(default_factory=list)
    minimizer: np.ndarray | None = field(default=None, repr=False)


def _E_and_grad(S, W, u, q, n):
    Su = S @ u
    N = float(u @ Su)
    au = np.abs(u)
    D = float(W @ au ** q)
    E = N / D ** (2 / q)
    grad = (2 * Su - 2 * (N / D) * W * au ** (q - 2) * u) / D ** (2 / q)
    return E, grad


def _minimize(S, W, u, q, n, iters, tol, precond):
    """Projected gradient with Armijo backtracking on the unit L^q sphere; the
    gradient is taken in the shifted H^1 inner product given by `precond`."""
    u = np.abs(u)
    u = u / (W @ u ** q) ** (1 / q)
    E, g = _E_and_grad(S, W, u, q, n)
    trace = [E]
    step = 1.0
    stagnated = True
    for _ in range(iters):
        d = -precond(g)
        slope = float(g @ d)
        if -slope < tol * max(1.0, abs(E)):
            stagnated = False
            break
        t = step
        while True:
            v = np.abs(u + t * d)
            v = v / (W @ v ** q) ** (1 / q)
            Ev, gv = _E_and_grad(S, W, v, q, n)
            if Ev <= E + 1e-4 * t * slope or t < 1e-14:
                break
            t *= 0.5
        if Ev > E:
            break
        u, E, g = v, Ev, gv
        trace.append(E)
        step = min(t * 2.0, 1e6)
    return u, E, trace, stagnated


def estimate_Q(chart: Chart, grid: Grid, restarts: int = 5, seed: int = 0, iters: int = 300,
               tol: float = 1e-10) -> QBracket:
    """Bracket [lower, upper] for the discrete Q(M)."""
    op = ConformalOperator(chart, grid, "energy")
    s = assemble_system(op)
    n = chart.n
    q = 2 * n / (n - 2)
    # test functions vanish on artificial faces
    fr = np.flatnonzero(s.free)
    S = (-s.A)[fr][:, fr].tocsr()
    W = s.W[fr]
    rng = np.random.default_rng(seed)
    X = grid.points()
    span = chart.hi - chart.lo
    starts = [np.ones(grid.size)[fr]]
    for _ in range(restarts):
        f = np.ones(grid.shape)
        for _k in range(3):
            kvec = rng.integers(0, 3, size=n)
            ph = rng.uniform(0, 2 * np.pi)
            f = f + rng.uniform(-0.4, 0.4) * np.cos(np.pi * np.sum(kvec * (X - chart.lo) / span, axis=-1) + ph)
        starts.append(np.maximum(f, 0.05).ravel()[fr])
    lam = coercivity_probe(op)
    shift = (q - 1) * abs(lam) + 1e-3
    lu = splu((S + sp.diags(shift * W)).tocsc())
    best = None
    values = []
    stag_any = False
    for u0 in starts:
        u, E, trace, stag = _minimize(S, W, u0, q, n, iters, tol, lu.solve)
        values.append(E)
        stag_any |= stag
        if best is None or E < best[1]:
            best = (u, E, trace)
    vol = float(np.sum(W))
    # clamp roundoff: the eigenvalue bound can exceed the optimum by ~1e-14
    lower = min(min(lam, 0.0) * vol ** (2 / n), best[1])
    full = np.zeros(grid.size)
    full[fr] = best[0]
    return QBracket(lower, best[1], lam, stag_any, best[2], values, full.reshape(grid.shape))
