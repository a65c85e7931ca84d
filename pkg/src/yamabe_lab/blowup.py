"""Bubble detection and fitting, the v/w split, the weighted eigenbasis around
a positive limit u_inf and the constrained solve for u_z.

Quadratic forms are the discrete c_n|du|^2 + R0 u^2 (+ 2H u^2 on physical
faces) of the finite-volume system; R0 overrides the chart curvature when set.
Kinds A and B refer to the physical face {x_n = lo_n}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage
from scipy.optimize import lsq_linear

from .bubbles import BubbleSpec, bubble_jet, chi_jet, glued_jet
from .conformal import ConformalOperator, assemble_system
from .functionals import energy
from .geometry import Chart, Field, Grid


# ---------------------------------------------------------------------------
# quadratic form

def h1_matrix(chart: Chart, grid: Grid, R0: float | None = None):
    """Symmetric S with u^T S u = the discrete energy numerator; (S, system)."""
    op = ConformalOperator(chart, grid, "energy")
    s = assemble_system(op)
    S = -s.A
    if R0 is not None:
        S = S + sp.diags(s.W * (R0 - s.Rnode))
    return S.tocsr(), s


def _depth(chart: Chart, x) -> float:
    """Distance to the face {x_n = lo_n} if physical, else inf."""
    n = chart.n
    if (n - 1, 0) not in chart.physical:
        return np.inf
    return float(x[-1] - chart.lo[-1])


def zone(chart: Chart, x, delta0: float, tol: float = 1e-12) -> str:
    """A on the boundary, B within 3 delta0/2 (ties toward B), C otherwise."""
    d = _depth(chart, x)
    if d <= tol:
        return "A"
    return "B" if d <= 1.5 * delta0 else "C"


# ---------------------------------------------------------------------------
# peaks

def detect_peaks(u: Field, chart: Chart, rel_floor: float = 0.05, size: int = 3):
    """Local maxima above a noise floor, as (x, eps) pairs sorted by height.

    eps comes from the half-height radius r_h of U_eps:
    r_h = eps sqrt(2^{2/(n-2)} - 1), with heights measured above min(u).
    """
    f = np.asarray(u.values, dtype=float)
    grid = u.grid
    n = chart.n
    if np.any(f < 0):
        raise ValueError("u must be nonnegative")
    base = float(f.min())
    top = float(f.max())
    if top - base <= 1e-12 * max(1.0, abs(top)):
        return []
    mx = ndimage.maximum_filter(f, size=size, mode="nearest")
    mn = ndimage.minimum_filter(f, size=2 * size - 1, mode="nearest")
    cand = (f == mx) & (f - base > rel_floor * (top - base)) & (f > mn)
    idx = np.argwhere(cand)
    heights = f[cand]
    order = np.argsort(-heights, kind="stable")
    k = (n - 2) / 2
    shape_fac = np.sqrt(2 ** (1 / k) - 1)
    out = []
    for i in order:
        p = tuple(idx[i])
        half = base + 0.5 * (f[p] - base)
        radii = []
        for a in range(n):
            ax = grid.axes[a]
            for step in (-1, 1):
                j = p[a]
                while 0 <= j + step < len(ax) and f[p[:a] + (j + step,) + p[a + 1:]] > half:
                    j += step
                jn = j + step
                if not 0 <= jn < len(ax):
                    continue
                f0 = f[p[:a] + (j,) + p[a + 1:]]
                f1 = f[p[:a] + (jn,) + p[a + 1:]]
                s = (f0 - half) / (f0 - f1)
                radii.append(abs(ax[j] + s * (ax[jn] - ax[j]) - ax[p[a]]))
        x = np.array([grid.axes[a][p[a]] for a in range(n)])
        if radii:
            out.append((x, float(np.median(radii)) / shape_fac))
    return out


# ---------------------------------------------------------------------------
# profiles and parameter derivatives

@dataclass
class FitConfig:
    rho: float = 0.3
    delta0: float = 0.02
    R0: float | None = 1.0
    C_B: float = 1.0
    rbar_inf: float | None = None
    alpha_bounds: tuple = (0.5, 2.0)
    eps_ratio: float = 4.0      # eps box [eps0/r, eps0 r]
    x_box: float = 3.0          # |x - x0| <= x_box * eps0 per coordinate
    max_iter: int = 60
    tol: float = 1e-14


def _spec(kind, x, eps, cfg: FitConfig, chart: Chart) -> BubbleSpec:
    delta = _depth(chart, x) if kind == "B" else 0.0
    return BubbleSpec(kind, np.array(x, dtype=float), float(eps), cfg.rho, rbar_inf=cfg.rbar_inf,
                      delta=delta, C_B=cfg.C_B)


def _free_axes(kind: str, n: int):
    return list(range(n - 1)) if kind == "A" else list(range(n))


def profile(kind, x, eps, cfg: FitConfig, chart: Chart, X):
    """Glued profile at points X and its derivatives in (x_free, eps); (v, D)."""
    spec = _spec(kind, x, eps, cfg, chart)
    n = chart.n
    y = X - spec.center
    J = glued_jet(spec, y)
    k = (n - 2) / 2
    P = spec.prefactor()
    B = bubble_jet(y, eps, n)
    C = chi_jet(y, cfg.rho)
    G = spec.model_green().jet(y)
    r2 = np.sum(y * y, axis=1)
    plateau = np.sqrt(r2) <= 4.0 / 3.0 * cfg.rho
    dB = k * B.v * (1.0 / eps - 2 * eps / (eps ** 2 + r2))
    dek = k * eps ** (k - 1)
    with np.errstate(invalid="ignore"):
        de = P * np.where(plateau, dB, C.v * (dB - dek * G.v) + dek * G.v)
    cols = [-J.g[:, a] for a in _free_axes(kind, n)]
    if kind == "B":
        # the image pole at y_n = -2 delta moves with the normal coordinate
        d = spec.delta
        yi = y.copy()
        yi[:, -1] += 2 * d
        ri = np.linalg.norm(yi, axis=1)
        dGd = (2 - n) * ri ** (-n) * yi[:, -1]
        extra = np.where(plateau, 0.0, P * (1 - C.v) * eps ** k * dGd)
        cols[-1] = cols[-1] + extra
    cols.append(de)
    return J.v, np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# fit

@dataclass
class BubbleFit:
    m: int
    x: list
    eps: list
    alpha: list
    kinds: list
    w: Field
    w_energy: float
    C_nu: float
    separation: float
    objective_trace: list = field(default_factory=list)
    initial_objective: float = np.nan
    projected: bool = False
    rank_deficient: bool = False
    config: FitConfig | None = None

    def rows(self):
        return [dict(kind=k, x=" ".join(f"{c:.12g}" for c in x), eps=e, alpha=a)
                for k, x, e, a in zip(self.kinds, self.x, self.eps, self.alpha)]


FIT_COLUMNS = ("kind", "x", "eps", "alpha")


def separation(x, eps) -> float:
    """min over pairs of eps_i/eps_j + eps_j/eps_i + d(x_i, x_j)^2/(eps_i eps_j)."""
    best = np.inf
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            d2 = float(np.sum((np.asarray(x[i]) - np.asarray(x[j])) ** 2))
            best = min(best, eps[i] / eps[j] + eps[j] / eps[i] + d2 / (eps[i] * eps[j]))
    return best


def c_nu(chart: Chart, grid: Grid, w) -> float:
    """L^{2(n-1)/(n-2)} boundary norm plus L^{2n/(n-2)} volume norm of w."""
    n = chart.n
    _, s = h1_matrix(chart, grid, None)
    f = np.abs(np.ravel(w.values if isinstance(w, Field) else w))
    qb = 2 * (n - 1) / (n - 2)
    qv = 2 * n / (n - 2)
    out = float(np.dot(s.W, f ** qv)) ** (1 / qv)
    if np.any(s.sigma > 0):
        out += float(np.dot(s.sigma, f ** qb)) ** (1 / qb)
    return out


def _solve_alpha(Phi, SPhi, u, Su_dot, lo, hi):
    """Exact minimiser of |u - Phi a|_S^2 over the box [lo, hi]^m."""
    M = Phi.T @ SPhi
    b = SPhi.T @ u
    m = len(b)
    M = 0.5 * (M + M.T)
    try:
        Lc = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        Lc = np.linalg.cholesky(M + 1e-14 * np.trace(M) / m * np.eye(m))
    rhs = sla.solve_triangular(Lc, b, lower=True)
    res = lsq_linear(Lc.T, rhs, bounds=(np.full(m, lo), np.full(m, hi)), method="bvls",
                     tol=1e-15)
    return res.x


class _Problem:
    def __init__(self, u: Field, chart: Chart, cfg: FitConfig):
        self.chart, self.cfg = chart, cfg
        self.grid = u.grid
        self.X = self.grid.points().reshape(-1, chart.n)
        self.S, _ = h1_matrix(chart, self.grid, cfg.R0)
        self.u = np.ravel(u.values).astype(float)
        self.uSu = float(self.u @ (self.S @ self.u))

    def basis(self, kinds, xs, es, derivs=True):
        cols, ders = [], []
        for k, x, e in zip(kinds, xs, es):
            v, D = profile(k, x, e, self.cfg, self.chart, self.X)
            cols.append(v)
            ders.append(D)
        return np.stack(cols, axis=1), ders

    def objective(self, Phi, a):
        r = self.u - Phi @ a
        return float(r @ (self.S @ r)), r


def fit_bubbles(u: Field, chart: Chart, m: int, init, cfg: FitConfig | None = None) -> BubbleFit:
    """Gauss-Newton fit of u by sum_k alpha_k ubar(x_k, eps_k) in the discrete H^1 form.

    ``init`` is a list of (x, eps) pairs (e.g. from detect_peaks).  alpha is
    re-solved exactly within its box after every accepted step.
    """
    cfg = cfg or FitConfig()
    if m < 1:
        raise ValueError("m >= 1")
    if len(init) < m:
        raise ValueError("need m initial guesses")
    n = chart.n
    P = _Problem(u, chart, cfg)
    xs = [np.array(x, dtype=float) for x, _ in init[:m]]
    es = [float(e) for _, e in init[:m]]
    kinds = [zone(chart, x, cfg.delta0) for x in xs]
    for i, k in enumerate(kinds):
        if k == "A":
            xs[i][-1] = chart.lo[-1]
    x_lo = [np.maximum(x - cfg.x_box * e, chart.lo) for x, e in zip(xs, es)]
    x_hi = [np.minimum(x + cfg.x_box * e, chart.hi) for x, e in zip(xs, es)]
    e_lo = [e / cfg.eps_ratio for e in es]
    e_hi = [e * cfg.eps_ratio for e in es]
    alo, ahi = cfg.alpha_bounds

    Phi, ders = P.basis(kinds, xs, es)
    J0, _ = P.objective(Phi, np.ones(m))
    SPhi = P.S @ Phi
    a = _solve_alpha(Phi, SPhi, P.u, None, alo, ahi)
    J, r = P.objective(Phi, a)
    trace = [J]
    rank_def = False
    floor = 1e-30 * max(P.uSu, 1e-300)
    for _ in range(cfg.max_iter):
        if J <= floor:
            break
        # columns: -dr/dtheta = alpha_k dubar_k/dtheta, then -dr/dalpha = ubar_k
        D = np.concatenate([a[k] * ders[k] for k in range(m)] + [Phi], axis=1)
        SD = P.S @ D
        N = D.T @ SD
        g = SD.T @ r
        sc = np.sqrt(np.maximum(np.diag(N), 1e-300))
        Ns = N / np.outer(sc, sc)
        if np.linalg.cond(Ns) > 1e13:
            rank_def = True
            Ns = Ns + 1e-10 * np.eye(len(Ns))
        step = np.linalg.solve(Ns, g / sc) / sc
        t = 1.0
        accepted = False
        while t > 1e-8:
            pos = 0
            nx, ne = [], []
            for k in range(m):
                fa = _free_axes(kinds[k], n)
                x = xs[k].copy()
                x[fa] = x[fa] + t * step[pos:pos + len(fa)]
                pos += len(fa)
                x = np.clip(x, x_lo[k], x_hi[k])
                e = float(np.clip(es[k] + t * step[pos], e_lo[k], e_hi[k]))
                pos += 1
                nx.append(x)
                ne.append(e)
            try:
                Phi_t, ders_t = P.basis(kinds, nx, ne)
            except ValueError:
                t *= 0.5
                continue
            SPhi_t = P.S @ Phi_t
            a_t = _solve_alpha(Phi_t, SPhi_t, P.u, None, alo, ahi)
            J_t, r_t = P.objective(Phi_t, a_t)
            if J_t < J:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        rel = (J - J_t) / max(J, 1e-300)
        xs, es, Phi, ders, a, J, r = nx, ne, Phi_t, ders_t, a_t, J_t, r_t
        trace.append(J)
        if rel < cfg.tol and t == 1.0:
            break
    projected = any(np.any(np.isclose(x, lo) & (lo > chart.lo)) or np.any(np.isclose(x, hi) & (hi < chart.hi))
                    for x, lo, hi in zip(xs, x_lo, x_hi))
    projected |= any(np.isclose(e, lo) or np.isclose(e, hi) for e, lo, hi in zip(es, e_lo, e_hi))
    projected |= bool(np.any(np.isclose(a, alo) | np.isclose(a, ahi)))
    w = Field((P.u - Phi @ a).reshape(P.grid.shape), P.grid)
    return BubbleFit(m, xs, es, [float(v) for v in a], kinds, w, J, c_nu(chart, P.grid, w),
                     separation(xs, es), trace, J0, bool(projected), rank_def, cfg)


# ---------------------------------------------------------------------------
# v / w split

@dataclass
class SplitReport:
    v: Field
    w: Field
    C_nu: float
    E_v: float
    E_bubbles: list
    bound: float
    holds: bool


def split_vw(fit: BubbleFit, u: Field, chart: Chart, tol: float = 1e-6) -> SplitReport:
    """u = v + w with v = sum alpha_k ubar_k; compares E(v) with (sum E_k^{n/2})^{2/n}."""
    grid = u.grid
    n = chart.n
    cfg = fit.config or FitConfig()
    X = grid.points().reshape(-1, n)
    parts = []
    for k, x, e, a in zip(fit.kinds, fit.x, fit.eps, fit.alpha):
        parts.append(a * profile(k, x, e, cfg, chart, X)[0])
    vv = np.sum(parts, axis=0)
    uu = np.ravel(u.values)
    v = Field(vv.reshape(grid.shape), grid)
    w = Field((uu - vv).reshape(grid.shape), grid)
    op = ConformalOperator(chart, grid, "energy")
    Ev = energy(chart, grid, v, op).E
    Ek = [energy(chart, grid, p.reshape(grid.shape), op).E for p in parts]
    bound = float(np.sum(np.asarray(Ek) ** (n / 2)) ** (2 / n))
    return SplitReport(v, w, c_nu(chart, grid, w), Ev, Ek, bound, Ev <= bound * (1 + tol))


# ---------------------------------------------------------------------------
# eigenbasis around u_inf

@dataclass
class EigenBasis:
    psi: np.ndarray          # (count, N) nodal values, zero on artificial nodes
    lam: np.ndarray
    weight: np.ndarray       # W u_inf^{4/(n-2)}
    residuals: np.ndarray
    gram_error: float
    grid: Grid

    def modes(self):
        return [Field(p.reshape(self.grid.shape), self.grid) for p in self.psi]


def eigenbasis(u_inf: Field, chart: Chart, count: int, R0: float | None = None) -> EigenBasis:
    """S psi = lam W u^{4/(n-2)} psi on free nodes, weighted-orthonormal, lam ascending."""
    grid = u_inf.grid
    n = chart.n
    u = np.ravel(u_inf.values).astype(float)
    if np.any(u <= 0):
        raise ValueError("u_inf must be positive")
    S, s = h1_matrix(chart, grid, R0)
    fr = np.flatnonzero(s.free)
    if count > len(fr):
        raise ValueError(f"count {count} exceeds the {len(fr)} free nodes")
    wt = s.W * u ** (4 / (n - 2))
    Sf = S[fr][:, fr]
    Mf = wt[fr]
    if len(fr) <= 3000:
        lam, V = sla.eigh(Sf.toarray(), np.diag(Mf), subset_by_index=[0, count - 1])
    else:
        lam, V = spla.eigsh(Sf.tocsc(), k=count, M=sp.diags(Mf).tocsc(), sigma=-1.0, which="LM",
                            v0=np.random.default_rng(0).standard_normal(len(fr)), tol=0.0)
        o = np.argsort(lam)
        lam, V = lam[o], V[:, o]
    # re-orthonormalize (degenerate clusters) and recompute Rayleigh quotients
    G = V.T @ (Mf[:, None] * V)
    Lc = np.linalg.cholesky(0.5 * (G + G.T))
    V = sla.solve_triangular(Lc, V.T, lower=True).T
    H = V.T @ (Sf @ V)
    lam2, Q = np.linalg.eigh(0.5 * (H + H.T))
    V = V @ Q
    lam = lam2
    # sign convention: positive weighted mean
    for j in range(count):
        if np.dot(Mf, V[:, j]) < 0 or (abs(np.dot(Mf, V[:, j])) < 1e-12 and V[np.argmax(np.abs(V[:, j])), j] < 0):
            V[:, j] = -V[:, j]
    res = np.array([np.linalg.norm(Sf @ V[:, j] - lam[j] * Mf * V[:, j]) / max(1.0, abs(lam[j]))
                    for j in range(count)])
    G = V.T @ (Mf[:, None] * V)
    psi = np.zeros((count, grid.size))
    psi[:, fr] = V.T
    return EigenBasis(psi, lam, wt, res, float(np.max(np.abs(G - np.eye(count)))), grid)


def low_modes(basis: EigenBasis, rbar_inf: float, n: int) -> list:
    """Indices with lam_a <= (n+2)/(n-2) rbar_inf (strict inequality excludes)."""
    thr = (n + 2) / (n - 2) * rbar_inf
    return [a for a, l in enumerate(basis.lam) if not l > thr]


# ---------------------------------------------------------------------------
# u_z

class NewtonFailure(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass
class UzResult:
    u: Field
    multipliers: np.ndarray
    equation_residual: float
    constraint_residual: float
    iterations: int


@dataclass
class UzProblem:
    u_inf: Field
    chart: Chart
    rbar_inf: float
    basis: EigenBasis
    A: list
    R0: float | None = None
    zeta_hat: float = 0.1

    def __post_init__(self):
        self.S, self.sys = h1_matrix(self.chart, self.u_inf.grid, self.R0)
        self.fr = np.flatnonzero(self.sys.free)

    def stationary(self, ub):
        """W-scaled c_n Lap u - R u + rbar u^{(n+2)/(n-2)} with the boundary term."""
        n = self.chart.n
        return -(self.S @ ub) + self.sys.W * self.rbar_inf * np.abs(ub) ** ((n + 2) / (n - 2)) * np.sign(ub)

    def projected(self, F):
        """Gamma applied to the nodal residual F/W; returned W-scaled."""
        B = self.basis.weight[:, None] * self.basis.psi[self.A].T
        coef = self.basis.psi[self.A] @ F
        return F - B @ coef


def solve_uz(prob: UzProblem, z, tol: float = 1e-12, max_iter: int = 30) -> UzResult:
    """Newton on Gamma(stationary(u)) = 0 with int u_inf^{4/(n-2)} (u - u_inf) psi_a = z_a."""
    z = np.asarray(z, dtype=float)
    if z.shape != (len(prob.A),):
        raise ValueError("z must have one entry per low mode")
    if np.linalg.norm(z) > prob.zeta_hat:
        raise ValueError(f"|z| exceeds the trust radius {prob.zeta_hat}")
    n = prob.chart.n
    p = (n + 2) / (n - 2)
    fr = prob.fr
    u0 = np.ravel(prob.u_inf.values).astype(float)
    B = (prob.basis.weight[:, None] * prob.basis.psi[prob.A].T)[fr]     # W u^{4/(n-2)} psi_a
    ub = u0.copy()
    ub[fr] = ub[fr] + prob.basis.psi[prob.A][:, fr].T @ z               # first-order guess
    c = np.zeros(len(prob.A))
    Sff = prob.S[fr][:, fr]
    scale = max(1.0, float(np.max(np.abs(prob.sys.W * u0))))
    for it in range(1, max_iter + 1):
        F = prob.stationary(ub)[fr] - B @ c
        con = B.T @ (ub[fr] - u0[fr]) - z
        if np.max(np.abs(F)) <= tol * scale and np.max(np.abs(con)) <= tol:
            break
        Jd = prob.sys.W[fr] * prob.rbar_inf * p * np.abs(ub[fr]) ** (p - 1)
        J = -Sff + sp.diags(Jd)
        K = sp.bmat([[J, sp.csr_matrix(-B)], [sp.csr_matrix(B.T), None]]).tocsc()
        d = spla.spsolve(K, -np.concatenate([F, con]))
        ub[fr] += d[:len(fr)]
        c += d[len(fr):]
        if not np.all(np.isfinite(ub)):
            raise NewtonFailure("Newton diverged", Field(ub.reshape(prob.u_inf.grid.shape), prob.u_inf.grid))
    else:
        raise NewtonFailure("Newton did not converge", Field(ub.reshape(prob.u_inf.grid.shape),
                                                            prob.u_inf.grid))
    full = np.zeros_like(ub)
    full[fr] = prob.stationary(ub)[fr]
    eq = float(np.max(np.abs(prob.projected(full)[fr] / prob.sys.W[fr])))
    con = float(np.max(np.abs(B.T @ (ub[fr] - u0[fr]) - z))) if len(z) else 0.0
    return UzResult(Field(ub.reshape(prob.u_inf.grid.shape), prob.u_inf.grid), c, eq, con, it)
