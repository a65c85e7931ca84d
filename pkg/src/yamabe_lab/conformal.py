"""Conformal Laplacian L_g, boundary operator B_g, conformal-change formulas and
the elliptic solver with the Neumann-type boundary condition.

Two conventions are supported and never mixed implicitly:

* ``energy``:     L = c_n Delta - R,       B = (c_n/2) d_eta - H
* ``appendixB``:  L = Delta - R/c_n,       B = d_eta - 2H/c_n

with c_n = 4(n-1)/(n-2) and eta the inward unit normal.  The energy forms are
c_n (resp. c_n/2) times the appendixB forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (ARTIFICIAL, BOUNDARY, INTERIOR, Chart, Field, Grid,
                       boundary_weights, mean_curvature, metric_derivatives,
                       scalar_curvature, _christoffel_from, _inverse)

CONVENTIONS = ("energy", "appendixB")


def c_n(n: int) -> float:
    return 4.0 * (n - 1) / (n - 2)


def convention_factor(n: int, which: str = "L") -> float:
    """Exact ratio energy/appendixB: c_n for L and c_n/2 for B."""
    return c_n(n) if which == "L" else c_n(n) / 2


class ConventionError(ValueError):
    pass


class PositivityError(ValueError):
    def __init__(self, msg, node=None):
        super().__init__(msg)
        self.node = node


class SolvabilityError(RuntimeError):
    def __init__(self, msg, eigenvalue=None):
        super().__init__(msg)
        self.eigenvalue = eigenvalue


@dataclass
class BoundaryField:
    """Values on each physical face, keyed by (axis, side)."""
    faces: dict

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.faces.values()), default=0.0)

    def interior_of_faces(self) -> dict:
        """Face values with the face's own edges trimmed (avoids corner ambiguity)."""
        out = {}
        for f, v in self.faces.items():
            out[f] = v[tuple(slice(1, -1) for _ in v.shape)]
        return out


@dataclass
class ConformalOperator:
    chart: Chart
    grid: Grid
    convention: str = "energy"
    h_fd: float | None = None
    R: np.ndarray = field(init=False, repr=False)
    H: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ConventionError(f"unknown convention {self.convention}")
        if not self.grid.uniform:
            raise ValueError("finite differences need a uniform grid")
        chart, grid = self.chart, self.grid
        self.n = chart.n
        hfd = self.h_fd or float(np.min(grid.h))
        self.h_fd = hfd
        pts = grid.points().reshape(-1, self.n)
        if chart.flat:
            self.R = np.zeros(grid.shape)
            self._ginv = None
        else:
            self.R = scalar_curvature(chart, pts, hfd).reshape(grid.shape)
            g, dg, _ = metric_derivatives(chart, pts, hfd)
            ginv = _inverse(g)
            gam = _christoffel_from(ginv, dg)
            self._ginv = ginv.reshape(grid.shape + (self.n, self.n))
            self._gam_c = np.einsum("pab,pcab->pc", ginv, gam).reshape(grid.shape + (self.n,))
        self.H = {}
        for face in chart.physical:
            sl = grid.face_slice(*face)
            fp = grid.points()[sl]
            if chart.flat:
                self.H[face] = np.zeros(fp.shape[:-1])
            else:
                self.H[face] = mean_curvature(chart, fp.reshape(-1, self.n), hfd).reshape(fp.shape[:-1])
        self._system = None

    # --------------------------------------------------------------- helpers
    @property
    def cL(self) -> float:
        return c_n(self.n) if self.convention == "energy" else 1.0

    @property
    def cB(self) -> float:
        return c_n(self.n) / 2 if self.convention == "energy" else 1.0

    def _rcoef(self) -> float:
        return 1.0 if self.convention == "energy" else 1.0 / c_n(self.n)

    def check(self, expect):
        if expect is not None and expect != self.convention:
            raise ConventionError(f"operator uses '{self.convention}', caller expects '{expect}'")

    def converted(self, convention: str) -> "ConformalOperator":
        """Explicit conversion to the other convention (same chart/grid)."""
        op = ConformalOperator.__new__(ConformalOperator)
        op.__dict__.update(self.__dict__)
        if convention not in CONVENTIONS:
            raise ConventionError(convention)
        op.convention = convention
        op._system = None
        return op

    # ------------------------------------------------------ pure evaluation
    def laplacian(self, f: np.ndarray) -> np.ndarray:
        """Second-order Laplace-Beltrami (one-sided second-order at box edges)."""
        h = self.grid.h
        n = self.n
        d1 = [np.gradient(f, h[a], axis=a, edge_order=2) for a in range(n)]
        d2 = [_second_diff(f, h[a], a) for a in range(n)]
        if self.chart.flat:
            return sum(d2)
        ginv = self._ginv
        out = np.zeros_like(f)
        for a in range(n):
            out += ginv[..., a, a] * d2[a]
            for b in range(a + 1, n):
                mixed = np.gradient(d1[a], h[b], axis=b, edge_order=2)
                out += 2 * ginv[..., a, b] * mixed
        for c in range(n):
            out -= self._gam_c[..., c] * d1[c]
        return out

    def normal_derivative(self, f: np.ndarray) -> BoundaryField:
        """d f / d eta (inward unit normal) on each physical face, one-sided O(h^2)."""
        out = {}
        h = self.grid.h
        for (k, side) in self.chart.physical:
            s = 1.0 if side == 0 else -1.0
            idx = [0, 1, 2] if side == 0 else [-1, -2, -3]
            f0, f1, f2 = (np.take(f, i, axis=k) for i in idx)
            dn = s * (-3 * f0 + 4 * f1 - f2) / (2 * h[k])  # d/dx_k, sign to inward
            if self.chart.flat:
                out[(k, side)] = dn
                continue
            sl = self.grid.face_slice(k, side)
            ginv = self._ginv[sl]
            # eta^a = s g^{ak}/sqrt(g^kk); inward derivative = eta^a d_a f
            val = np.sqrt(ginv[..., k, k]) * dn
            for a in range(self.n):
                if a == k:
                    continue
                da = np.gradient(f, h[a], axis=a, edge_order=2)[sl]
                val = val + s * ginv[..., a, k] / np.sqrt(ginv[..., k, k]) * da
            out[(k, side)] = val
        return BoundaryField(out)


def _second_diff(f, h, axis):
    f = np.moveaxis(f, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h ** 2
    out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h ** 2
    out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h ** 2
    return np.moveaxis(out, 0, axis)


def _values(z):
    return z.values if isinstance(z, Field) else np.asarray(z, dtype=float)


def apply_L(op: ConformalOperator, zeta, expect: str | None = None) -> Field:
    op.check(expect)
    f = _values(zeta)
    return Field(op.cL * op.laplacian(f) - op._rcoef() * op.R * f, op.grid)


def apply_B(op: ConformalOperator, zeta, expect: str | None = None) -> BoundaryField:
    op.check(expect)
    if not op.chart.has_boundary:
        raise ValueError("chart has no physical boundary")
    f = _values(zeta)
    dn = op.normal_derivative(f)
    hc = 1.0 if op.convention == "energy" else 2.0 / c_n(op.n)
    out = {}
    for face, v in dn.faces.items():
        out[face] = op.cB * v - hc * op.H[face] * f[op.grid.face_slice(*face)]
    return BoundaryField(out)


def _energy_op(chart, grid, op):
    if op is None:
        return ConformalOperator(chart, grid, "energy")
    return op if op.convention == "energy" else op.converted("energy")


def conformal_scalar(chart: Chart, u, grid: Grid | None = None, op=None) -> Field:
    """R of u^{4/(n-2)} g0 via -u^{-(n+2)/(n-2)} L_{g0} u (energy form)."""
    grid = grid or u.grid
    f = _values(u)
    if np.any(f <= 0):
        bad = np.unravel_index(np.argmin(f), f.shape)
        raise PositivityError("conformal factor must be positive", node=bad)
    op = _energy_op(chart, grid, op)
    n = chart.n
    return Field(-f ** (-(n + 2) / (n - 2)) * apply_L(op, f).values, grid)


def conformal_mean(chart: Chart, u, grid: Grid | None = None, op=None) -> BoundaryField:
    """H of u^{4/(n-2)} g0 on the physical faces."""
    grid = grid or u.grid
    f = _values(u)
    if np.any(f <= 0):
        raise PositivityError("conformal factor must be positive")
    op = _energy_op(chart, grid, op)
    n = chart.n
    b = apply_B(op, f)
    return BoundaryField({face: -f[grid.face_slice(*face)] ** (-n / (n - 2)) * v
                          for face, v in b.faces.items()})


# ---------------------------------------------------------------------------
# weighted finite-volume system (ghost-node Neumann, symmetric)

@dataclass
class System:
    """W L_h u with the boundary operator built in: A u + 2 sigma fbar.

    A is symmetric; W are nodal volume weights, sigma nodal boundary weights.
    Rows of artificial nodes are kept for bookkeeping but are Dirichlet.
    """
    A: sp.csr_matrix
    K: sp.csr_matrix
    W: np.ndarray
    sigma: np.ndarray
    Hnode: np.ndarray
    Rnode: np.ndarray
    free: np.ndarray
    kind: np.ndarray
    edges: list


def assemble_system(op: ConformalOperator) -> System:
    if op._system is not None:
        return op._system
    chart, grid = op.chart, op.grid
    n = op.n
    shape = grid.shape
    N = grid.size
    idx = np.arange(N).reshape(shape)
    pts = grid.points()
    kind = grid.classify()
    wvol = grid.volume_weights()
    if chart.flat:
        sqrtg = np.ones(shape)
    else:
        g = chart.g(pts)
        if np.max(np.abs(g - np.einsum("...ii->...i", g)[..., None] * np.eye(n))) > 1e-12:
            raise NotImplementedError("grid solver requires a diagonal metric")
        sqrtg = np.sqrt(np.prod(np.einsum("...ii->...i", g), axis=-1))
    W = (wvol * sqrtg).ravel()
    rows, cols, vals = [], [], []
    edges = []
    h = grid.h
    for a in range(n):
        lo = [slice(None)] * n
        hi = [slice(None)] * n
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        i0 = idx[tuple(lo)].ravel()
        i1 = idx[tuple(hi)].ravel()
        mid = 0.5 * (pts[tuple(lo)] + pts[tuple(hi)])
        if chart.flat:
            kap = np.ones(mid.shape[:-1])
        else:
            gm = chart.g(mid)
            diag = np.einsum("...ii->...i", gm)
            kap = np.sqrt(np.prod(diag, axis=-1)) / diag[..., a]
        # transverse trapezoid weight of the edge
        tw = np.ones(mid.shape[:-1])
        for b in range(n):
            if b == a:
                continue
            wb = grid.weights1d[b]
            shp = [1] * n
            shp[b] = len(wb)
            tw = tw * wb.reshape(shp)
        coef = (op.cL * kap * tw / h[a]).ravel()
        edges.append((i0, i1, coef))
        rows += [i0, i1]
        cols += [i1, i0]
        vals += [coef, coef]
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    sigma = np.zeros(N)
    Hn = np.zeros(N)
    for face in chart.physical:
        sl = grid.face_slice(*face)
        bw = boundary_weights(chart, grid, *face)
        fi = idx[sl].ravel()
        np.add.at(sigma, fi, bw.ravel())
        # corner nodes shared by faces accumulate area-weighted H
        np.add.at(Hn, fi, (bw * op.H[face]).ravel())
    with np.errstate(invalid="ignore", divide="ignore"):
        Hn = np.where(sigma > 0, Hn / np.where(sigma > 0, sigma, 1), 0.0)
    rc = op._rcoef()
    hc = 1.0 if op.convention == "energy" else 2.0 / c_n(n)
    # boundary term: -(cL/cB) sigma (cB d_eta u) = -(cL/cB) sigma (fbar + hc H u)
    bfac = op.cL / op.cB
    diag = -np.asarray(K.sum(axis=1)).ravel() - W * rc * op.R.ravel() - bfac * sigma * hc * Hn
    A = (K + sp.diags(diag)).tocsr()
    free = (kind.ravel() != ARTIFICIAL)
    op._system = System(A, K, W, sigma, Hn, op.R.ravel().copy(), free, kind.ravel(), edges)
    op._bfac = bfac
    return op._system


def apply_Lh(op: ConformalOperator, u) -> np.ndarray:
    """Nodal L_h u with homogeneous boundary data built in (Neumann-type)."""
    s = assemble_system(op)
    f = _values(u).ravel()
    return (s.A @ f / s.W).reshape(op.grid.shape)


def quadratic_form(op: ConformalOperator, u) -> float:
    """-u^T A u computed from edge differences: c|du|^2 + R u^2 + 2H u^2 terms."""
    s = assemble_system(op)
    f = _values(u).ravel()
    tot = 0.0
    for i0, i1, coef in s.edges:
        d = f[i1] - f[i0]
        tot += float(np.dot(coef, d * d))
    tot += float(np.dot(s.W * op._rcoef() * s.Rnode, f * f))
    hc = 1.0 if op.convention == "energy" else 2.0 / c_n(op.n)
    tot += float(np.dot(op._bfac * s.sigma * hc * s.Hnode, f * f))
    return tot


def coercivity_probe(op: ConformalOperator) -> float:
    """Smallest eigenvalue of -L_h (weighted) on the free nodes."""
    s = assemble_system(op)
    fr = np.flatnonzero(s.free)
    M = (-s.A)[fr][:, fr].tocsc()
    Wf = s.W[fr]
    Dm = sp.diags(1 / np.sqrt(Wf))
    S = (Dm @ M @ Dm).tocsc()
    if S.shape[0] <= 400:
        return float(np.linalg.eigvalsh(S.toarray())[0])
    # fixed start vector: ARPACK's default one is random and breaks reproducibility
    v0 = np.random.default_rng(0).standard_normal(len(fr))
    try:
        lam = spla.eigsh(S, k=1, sigma=-1e-3 * abs(S.diagonal()).max() - 1.0, which="LM",
                         return_eigenvectors=False, v0=v0)
        return float(np.min(lam))
    except Exception:
        lam = spla.eigsh(S, k=1, which="SA", return_eigenvectors=False, maxiter=20000, tol=1e-8,
                         v0=v0)
        return float(lam[0])


def _cg(M, b, x0=None, tol=1e-10):
    d = M.diagonal()
    pre = spla.LinearOperator(M.shape, matvec=lambda v: v / d)
    cap = int(50 * np.sqrt(M.shape[0])) + 50
    x, info = spla.cg(M, b, x0=x0, rtol=tol, atol=0.0, maxiter=cap, M=pre)
    if info != 0:
        # fall back to a direct factorisation; keeps determinism
        x = spla.spsolve(M.tocsc(), b)
    return x


def solve_bvp(op: ConformalOperator, f, fbar=None, dirichlet=None, check=True,
              tol=1e-10) -> Field:
    """Solve L u = f in M, B u = fbar on the physical boundary.

    ``fbar`` is a BoundaryField (or dict) or None for zero data; artificial
    edges take Dirichlet values ``dirichlet`` (array on the grid, default 0).
    """
    s = assemble_system(op)
    grid = op.grid
    N = grid.size
    if check:
        lam = coercivity_probe(op)
        scale = float(np.max(np.abs(s.A.diagonal()[s.free] / s.W[s.free])))
        if lam <= 1e-12 * max(scale, 1.0):
            raise SolvabilityError(f"operator not coercive (probe eigenvalue {lam:.3e})", lam)
    b = s.W * _values(f).ravel()
    if fbar is not None:
        faces = fbar.faces if isinstance(fbar, BoundaryField) else fbar
        idx = np.arange(N).reshape(grid.shape)
        for face, v in faces.items():
            bw = boundary_weights(op.chart, grid, *face)
            np.add.at(b, idx[grid.face_slice(*face)].ravel(), (op._bfac * bw * np.asarray(v)).ravel())
    ud = np.zeros(N) if dirichlet is None else _values(dirichlet).ravel().copy()
    fr = np.flatnonzero(s.free)
    ar = np.flatnonzero(~s.free)
    A = s.A
    rhs = b[fr] - A[fr][:, ar] @ ud[ar]
    M = (-A[fr][:, fr]).tocsr()
    x = _cg(M, -rhs, tol=tol)
    u = ud.copy()
    u[fr] = x
    return Field(u.reshape(grid.shape), grid)


def system_residual(op: ConformalOperator, u, f, fbar=None) -> tuple[float, float]:
    """Max residual of the discrete problem on interior and boundary rows."""
    s = assemble_system(op)
    grid = op.grid
    N = grid.size
    b = s.W * _values(f).ravel()
    if fbar is not None:
        faces = fbar.faces if isinstance(fbar, BoundaryField) else fbar
        idx = np.arange(N).reshape(grid.shape)
        for face, v in faces.items():
            bw = boundary_weights(op.chart, grid, *face)
            np.add.at(b, idx[grid.face_slice(*face)].ravel(), (op._bfac * bw * np.asarray(v)).ravel())
    r = s.A @ _values(u).ravel() - b
    inter = (s.kind == INTERIOR)
    bd = (s.kind == BOUNDARY)
    ri = float(np.max(np.abs(r[inter] / s.W[inter]))) if inter.any() else 0.0
    # boundary rows expressed in units of B: divide by (cL/cB) sigma
    rb = float(np.max(np.abs(r[bd] / (op._bfac * s.sigma[bd])))) if bd.any() else 0.0
    return ri, rb


# ---------------------------------------------------------------------------
# conformal covariance

@dataclass
class CovarianceDefect:
    h: float
    interior: float
    boundary: float


def covariance_defect(chart: Chart, grid: Grid, u, zeta) -> CovarianceDefect:
    """Max nodal defects of L_{u^{4/(n-2)}g}(zeta/u) = u^{-(n+2)/(n-2)} L_g zeta (interior)
    and B_{u^{4/(n-2)}g}(zeta/u) = u^{-n/(n-2)} B_g zeta (physical faces, edges excluded).

    ``u`` and ``zeta`` are callables on chart points; u > 0.
    """
    from .geometry import conformal_chart
    n = chart.n
    X = grid.points()
    uf, zf = u(X), zeta(X)
    op0 = ConformalOperator(chart, grid)
    op1 = ConformalOperator(conformal_chart(chart, u), grid)
    lhs = apply_L(op1, zf / uf).values
    rhs = uf ** (-(n + 2) / (n - 2)) * apply_L(op0, zf).values
    kind = grid.classify()
    inner = kind == INTERIOR
    di = float(np.max(np.abs(lhs - rhs)[inner])) if inner.any() else 0.0
    db = 0.0
    if chart.has_boundary:
        b1 = apply_B(op1, zf / uf).faces
        b0 = apply_B(op0, zf).faces
        for face in b0:
            sl = grid.face_slice(*face)
            ok = kind[sl] == BOUNDARY
            d = np.abs(b1[face] - uf[sl] ** (-n / (n - 2)) * b0[face])
            if ok.any():
                db = max(db, float(np.max(d[ok])))
    return CovarianceDefect(float(np.max(grid.h)), di, db)


def covariance_order(chart: Chart, counts, u, zeta):
    """Defects on successively refined grids and the observed orders (log2 ratios)."""
    out = [covariance_defect(chart, Grid.uniform_grid(chart, c), u, zeta) for c in counts]
    hs = np.array([d.h for d in out])
    oi = np.log(np.array([d.interior for d in out[:-1]]) / np.array([d.interior for d in out[1:]])) \
        / np.log(hs[:-1] / hs[1:])
    ob = None
    if chart.has_boundary:
        ob = np.log(np.array([d.boundary for d in out[:-1]]) / np.array([d.boundary for d in out[1:]])) \
            / np.log(hs[:-1] / hs[1:])
    return out, oi, ob
