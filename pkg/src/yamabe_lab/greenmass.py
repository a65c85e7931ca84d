"""Green functions of the conformal Laplacian (parametrix, Giraud iteration,
correction solve), the flux integral I(x0, rho), and the ADM and boundary
mass flux integrals.

Green functions are assembled in the appendixB convention L = Delta - R/c_n,
B = d_eta - 2H/c_n.  The raw function satisfies

    -int G L phi - int_bdry G B phi = (n-2) sigma_{n-1} phi(x0)

and is stored together with a normalization tag: the stored G is the raw one
times ``scale`` so that |y - x0|^{n-2} G -> tag at the pole (tag 1 for
boundary and far-interior centers, 1/2 for centers in the boundary tube).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.optimize import curve_fit

from .bubbles import chi_jet
from .conformal import (BoundaryField, ConformalOperator, PositivityError, SolvabilityError,
                        assemble_system, c_n, coercivity_probe, solve_bvp, system_residual)
from .geometry import (ARTIFICIAL, Chart, DomainError, Field, Grid, mean_curvature,
                       metric_derivatives, volume_density, scalar_curvature, _christoffel_from, _inverse)
from .quadrature import (box_rule_singular, hemisphere_rule, sphere_area, sphere_rule,
                         tensor_weights)


def kappa(n: int) -> float:
    """(n-2) sigma_{n-1}: the pole strength of |y|^{2-n}."""
    return (n - 2) * sphere_area(n)


# ---------------------------------------------------------------------------
# parametrix

def _physical_plane(chart: Chart):
    """(axis, level) of the single physical face, or None."""
    if not chart.physical:
        return None
    if len(chart.physical) > 1:
        raise NotImplementedError("Green functions need at most one physical face")
    a, side = chart.physical[0]
    return a, float(chart.lo[a] if side == 0 else chart.hi[a])


def _reflect(p, plane):
    q = np.array(p, dtype=float, copy=True)
    if plane is not None:
        a, lev = plane
        q[..., a] = 2 * lev - q[..., a]
    return q


def _pole(d, n):
    """|d|^{2-n} with its gradient and Hessian in d."""
    r2 = np.sum(d * d, axis=-1)
    r = np.sqrt(r2)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = r ** (2 - n)
        g = (2 - n) * r[..., None] ** (-n) * d
        I = np.eye(d.shape[-1])
        h = (2 - n) * r[..., None, None] ** (-n) * (I - n * d[..., :, None] * d[..., None, :]
                                                    / r2[..., None, None])
    return v, g, h


def _sqrt_metric(g):
    dg = np.einsum("...ii->...i", g)
    if np.array_equal(g, dg[..., None] * np.eye(g.shape[-1])):
        return np.sqrt(dg)[..., None] * np.eye(g.shape[-1])
    lam, V = np.linalg.eigh(g)
    return np.einsum("...ab,...b,...cb->...ac", V, np.sqrt(lam), V)


def _frozen_pole(y, c, A, n):
    """|A (y - c)|^{2-n} and its y-gradient and y-Hessian; A may vary per source."""
    d = (A @ (y - c)[..., None])[..., 0]
    v, gd, hd = _pole(d, n)
    g = (gd[..., None, :] @ A)[..., 0, :]
    h = np.swapaxes(A, -1, -2) @ hd @ A
    return v, g, h


def _pair_jet(y, c, cs, A, n):
    v, g, h = _frozen_pole(y, c, A, n)
    if cs is not None:
        v2, g2, h2 = _frozen_pole(y, cs, A, n)
        v, g, h = v + v2, g + g2, h + h2
    return v, g, h


@dataclass
class Kernel:
    """Parametrix K(x0, .) built on the frozen metric g(x0) = A^T A:
    image pair |A(y-x0)|^{2-n} + |A(y-x0*)|^{2-n} (K1) or chi |A(y-x0)|^{2-n} (K2)."""
    n: int
    center: np.ndarray
    branch: str
    image: np.ndarray | None
    rho0: float
    plane: tuple | None
    A: np.ndarray | None = None

    def __post_init__(self):
        if self.A is None:
            self.A = np.eye(self.n)

    def jet(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.branch == "K1":
            return _pair_jet(y, self.center, self.image, self.A, self.n)
        v, g, h = _frozen_pole(y, self.center, self.A, self.n)
        c = chi_jet(y - self.center, self.rho0)
        vv = c.v * v
        gg = c.g * v[:, None] + c.v[:, None] * g
        hh = (c.h * v[:, None, None] + c.g[:, :, None] * g[:, None, :]
              + g[:, :, None] * c.g[:, None, :] + c.v[:, None, None] * h)
        return vv, gg, hh

    def __call__(self, y):
        return self.jet(y)[0]

    def grad(self, y):
        return self.jet(y)[1]


def _depth(chart: Chart, x0, plane) -> float:
    if plane is None:
        return np.inf
    a, lev = plane
    return abs(float(x0[a]) - lev)


def parametrix_kernel(chart: Chart, x0, rho0: float) -> Kernel:
    """K1 (image-doubled pair) when d(x0) < 2 rho0, else K2 with cutoff chi_rho0."""
    x0 = np.asarray(x0, dtype=float)
    n = chart.n
    plane = _physical_plane(chart)
    if np.any(x0 < chart.lo - 1e-12) or np.any(x0 > chart.hi + 1e-12):
        raise DomainError("center outside the chart")
    for a in range(n):
        for s in (0, 1):
            if (a, s) in chart.physical:
                continue
            lev = chart.lo[a] if s == 0 else chart.hi[a]
            if abs(x0[a] - lev) < rho0:
                raise DomainError("center too close to an artificial edge")
    A = np.eye(n) if chart.flat else _sqrt_metric(chart.g(x0[None])[0])
    if plane is not None and np.any(np.abs(chart.g(x0[None])[0][plane[0]]
                                           - np.eye(n)[plane[0]] * chart.g(x0[None])[0][plane[0], plane[0]]) > 1e-12):
        raise NotImplementedError("image kernel needs g_{an} = 0 at the face")
    if _depth(chart, x0, plane) < 2 * rho0:
        return Kernel(n, x0, "K1", _reflect(x0, plane) if plane is not None else None, rho0, plane, A)
    return Kernel(n, x0, "K2", None, rho0, plane, A)


def center_kind(chart: Chart, x0, rho0: float) -> str:
    d = _depth(chart, np.asarray(x0, float), _physical_plane(chart))
    if d <= 1e-12:
        return "boundary"
    return "tubular" if d < 2 * rho0 else "interior"


# ---------------------------------------------------------------------------
# Giraud chain

@dataclass
class _PointGeometry:
    ginv: np.ndarray
    gam: np.ndarray  # g^ab Gamma^c_ab
    R: np.ndarray


def _geometry_at(chart: Chart, pts, h=1e-3) -> _PointGeometry:
    pts = np.atleast_2d(pts)
    g, dg, _ = metric_derivatives(chart, pts, h)
    ginv = _inverse(g)
    gam = np.einsum("pab,pcab->pc", ginv, _christoffel_from(ginv, dg))
    return _PointGeometry(ginv, gam, scalar_curvature(chart, pts, h))


def _apply_L(geo: _PointGeometry, v, g, h, n):
    """L_g f = g^ab (f_ab - Gamma^c_ab f_c) - R f / c_n from a jet (pointwise)."""
    return (np.einsum("...ab,...ab->...", geo.ginv, h) - np.einsum("...c,...c->...", geo.gam, g)
            - geo.R * v / c_n(n))


class _Family:
    """Kernels K(z, y) = |A_z (y - z)|^{2-n} + image, one per source z, with
    Gamma_1(z, y) = L_{g,y} K(z, y) / kappa evaluated at targets y."""

    def __init__(self, chart: Chart, hfd: float):
        self.chart = chart
        self.n = chart.n
        self.plane = _physical_plane(chart)
        self.hfd = hfd

    def A(self, z):
        return _sqrt_metric(self.chart.g(z))

    def values(self, z, y, Az=None, geo_y=None, gamma=True):
        """K and Gamma_1/kappa for paired arrays z (P, n), y (P, n)."""
        Az = self.A(z) if Az is None else Az
        zs = _reflect(z, self.plane) if self.plane is not None else None
        v, g, h = _pair_jet(y, z, zs, Az, self.n)
        if not gamma:
            return v, None
        L = _apply_L(geo_y, v, g, h, self.n)
        return v, L / kappa(self.n)


def _self_integrals(fam: _Family, grid: Grid, X, geo, m: int):
    """int_box K(z, y) dv_g(z) and int_box Gamma_1(z, y) dv_g(z) for every node y.

    Pyramid rules apexed at y resolve the direct pole; rules apexed at the foot
    of y on the physical face resolve the (nearby, outside) image pole."""
    chart = fam.chart
    n = fam.n
    MK = np.zeros(len(X))
    MG = np.zeros(len(X))
    for i, y in enumerate(X):
        gy = _PointGeometry(geo.ginv[i], geo.gam[i], geo.R[i])
        apexes = [y]
        if fam.plane is not None:
            foot = y.copy()
            foot[fam.plane[0]] = fam.plane[1]
            if np.linalg.norm(foot - y) > 1e-12:
                apexes.append(foot)
        for j, apex in enumerate(apexes):
            r = box_rule_singular(chart.lo, chart.hi, apex, m)
            z = r.nodes
            Az = fam.A(z)
            dens = np.sqrt(np.linalg.det(chart.g(z)))
            zs = _reflect(z, fam.plane) if fam.plane is not None else None
            # direct term on the first rule, image term on the second (or both on one)
            if len(apexes) == 1:
                v, g, h = _pair_jet(y[None, :], z, zs, Az, n)
            elif j == 0:
                v, g, h = _frozen_pole(y[None, :], z, Az, n)
            else:
                v, g, h = _frozen_pole(y[None, :], zs, Az, n)
            L = _apply_L(gy, v, g, h, n) / kappa(n)
            MK[i] += r.integrate(v * dens)
            MG[i] += r.integrate(L * dens)
    return MK, MG


@dataclass
class GiraudChain:
    """Gamma_k(x0, .) for k = 1..k_max on the grid, divided by (n-2) sigma_{n-1}
    so that the chain telescopes: L F_k = -kappa delta + kappa Gamma_{k+1}.
    ``convolutions[j]`` holds int Gamma_{j+1}(x0, z) K(z, .) dv_g(z)."""
    gammas: list
    kernel: Kernel
    convolutions: list = field(default_factory=list)


def _node_index(grid: Grid, x0):
    X = grid.points().reshape(-1, grid.chart.n)
    k = int(np.argmin(np.sum((X - x0) ** 2, axis=1)))
    return k, float(np.linalg.norm(X[k] - x0))


def _subtracted(W, f, M, Mself):
    """sum_{z != y} W_z (f_z - f_y) M[z, y] + f_y Mself[y] (M has a zero diagonal)."""
    return (W * f) @ M - f * (W @ M) + f * Mself


def giraud_chain(chart: Chart, grid: Grid, x0, k_max: int, rho0: float = 0.25,
                 m_self: int = 6) -> GiraudChain:
    """Gamma_1 = L_{g,y} K(x0, y) sampled on the grid and Gamma_{k+1} = int Gamma_k Gamma_1.

    Convolutions use singularity subtraction at the target node: the smooth
    difference is summed with Simpson weights, the frozen part is integrated
    with pyramid rules.  The pole node x0 itself is skipped (its leading part
    is odd, so this is a principal value)."""
    if k_max < 1:
        raise ValueError("k_max >= 1")
    x0 = np.asarray(x0, dtype=float)
    n = chart.n
    K = parametrix_kernel(chart, x0, rho0)
    if chart.flat:
        zero = [Field(np.zeros(grid.shape), grid) for _ in range(k_max)]
        return GiraudChain(zero, K, [np.zeros(grid.size)] * k_max)
    X = grid.points().reshape(-1, n)
    N = len(X)
    hfd = float(np.min(grid.h)) * 0.5
    geo = _geometry_at(chart, X, hfd)
    v, g, h = K.jet(X)
    L0 = _apply_L(geo, v, g, h, n) / kappa(n)
    k0, dist = _node_index(grid, x0)
    if dist < 1e-12:
        L0[k0] = 0.0
    if not np.all(np.isfinite(L0)):
        raise RuntimeError("nonconvergent convolution node")
    fam = _Family(chart, hfd)
    Kmat = np.zeros((N, N))
    Gmat = np.zeros((N, N))
    block = max(1, int(2e6 // (N * n * n)))
    Az_all = fam.A(X)
    for s in range(0, N, block):
        e = min(s + block, N)
        z = np.repeat(X[s:e], N, axis=0)
        y = np.tile(X, (e - s, 1))
        gy = _PointGeometry(np.tile(geo.ginv, (e - s, 1, 1)), np.tile(geo.gam, (e - s, 1)),
                            np.tile(geo.R, e - s))
        kv, gv = fam.values(z, y, np.repeat(Az_all[s:e], N, axis=0), gy)
        kv = kv.reshape(e - s, N)
        gv = gv.reshape(e - s, N)
        idx = np.arange(s, e)
        kv[idx - s, idx] = 0.0
        gv[idx - s, idx] = 0.0
        Kmat[s:e] = kv
        Gmat[s:e] = gv
    MK, MG = _self_integrals(fam, grid, X, geo, m_self)
    W = (tensor_weights(grid.axes) * volume_density(chart, grid)).ravel()
    gam = [L0]
    convs = []
    for k in range(k_max):
        convs.append(_subtracted(W, gam[-1], Kmat, MK))
        if k < k_max - 1:
            gam.append(_subtracted(W, gam[-1], Gmat, MG))
    if not all(np.all(np.isfinite(x)) for x in gam + convs):
        raise RuntimeError("nonconvergent convolution node")
    fields = [Field(x.reshape(grid.shape), grid) for x in gam]
    return GiraudChain(fields, K, convs)


@dataclass
class GammaProfile:
    r: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    slope1: float
    slope2: float


def gamma_profile(chart: Chart, x0, radii, directions=None, rho0: float = 0.25,
                  m: int = 6) -> GammaProfile:
    """sup over directions of |Gamma_1(x0, y)| and |Gamma_2(x0, y)| on |y - x0| = r, off-grid.

    Gamma_2 = int Gamma_1(x0, z) Gamma_1(z, y) dv_g(z) is split by the partition
    |z-y|^2/(|z-x0|^2+|z-y|^2) into two pieces, each singular at one apex only
    and integrated with pyramid rules graded toward it.  Default directions are
    the coordinate axes parallel to the physical face, so the image poles
    coincide with the direct ones."""
    x0 = np.asarray(x0, dtype=float)
    n = chart.n
    if directions is None:
        plane = _physical_plane(chart)
        directions = [np.eye(n)[a] for a in range(n) if plane is None or a != plane[0]]
    K = parametrix_kernel(chart, x0, rho0)
    fam = _Family(chart, 1e-3)
    radii = np.asarray(radii, dtype=float)
    kap = kappa(n)
    diam = float(np.linalg.norm(chart.hi - chart.lo))
    g1 = np.zeros(len(radii))
    g2 = np.zeros(len(radii))
    for i, r in enumerate(radii):
        for e in directions:
            y = x0 + r * np.asarray(e, dtype=float)
            gy = _geometry_at(chart, y[None])
            v, g, h = K.jet(y[None])
            g1[i] = max(g1[i], abs(float(_apply_L(gy, v, g, h, n)[0])) / kap)
            geo_y = _PointGeometry(gy.ginv[0], gy.gam[0], gy.R[0])
            tot = 0.0
            for first, apex in ((True, x0), (False, y)):
                rule = box_rule_singular(chart.lo, chart.hi, apex, m, t_scale=r / diam)
                z = rule.nodes
                v, g, h = K.jet(z)
                a1 = _apply_L(_geometry_at(chart, z), v, g, h, n) / kap
                _, a2 = fam.values(z, np.broadcast_to(y, z.shape), geo_y=geo_y)
                d0 = np.sum((z - x0) ** 2, axis=1)
                d1 = np.sum((z - y) ** 2, axis=1)
                psi = d1 / (d0 + d1) if first else d0 / (d0 + d1)
                f = a1 * a2 * psi * np.sqrt(np.linalg.det(chart.g(z)))
                tot += rule.integrate(np.where(np.isfinite(f), f, 0.0))
            g2[i] = max(g2[i], abs(tot))
    s1 = s2 = float("nan")
    if len(radii) >= 2:
        s1 = float(np.polyfit(np.log(radii), np.log(g1), 1)[0])
        s2 = float(np.polyfit(np.log(radii), np.log(g2), 1)[0])
    return GammaProfile(radii, g1, g2, s1, s2)


# ---------------------------------------------------------------------------
# Green tables

class _Spline:
    """Cubic B-spline interpolant of a grid field (values and FD gradient)."""

    def __init__(self, f: Field):
        self.grid = f.grid
        self.coef = ndimage.spline_filter(f.values, order=3, mode="nearest")

    def __call__(self, y):
        y = np.atleast_2d(y)
        idx = [(y[:, a] - ax[0]) / (ax[1] - ax[0]) for a, ax in enumerate(self.grid.axes)]
        return ndimage.map_coordinates(self.coef, idx, order=3, mode="nearest", prefilter=False)

    def grad(self, y, step=1e-5):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.zeros_like(y)
        for a in range(y.shape[1]):
            e = np.zeros(y.shape[1])
            e[a] = step
            out[:, a] = (self(y + e) - self(y - e)) / (2 * step)
        return out


@dataclass
class GreenTable:
    """G = scale * K + remainder, with |y - x0|^{n-2} G -> tag at the pole."""
    center: np.ndarray
    kernel: Kernel
    remainder: Field | Callable | None
    tag: float
    scale: float
    kind: str
    chain: GiraudChain | None = None
    checks: dict = field(default_factory=dict)
    remainder_grad: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        self._spline = _Spline(self.remainder) if isinstance(self.remainder, Field) else None

    @property
    def n(self) -> int:
        return self.kernel.n

    def _rem(self, y):
        if self.remainder is None:
            return np.zeros(len(y))
        if self._spline is not None:
            return self._spline(y)
        return np.asarray(self.remainder(y), dtype=float)

    def _rem_grad(self, y, step=1e-6):
        if self.remainder is None:
            return np.zeros_like(y)
        if self._spline is not None:
            return self._spline.grad(y)
        if self.remainder_grad is not None:
            return self.remainder_grad(y)
        out = np.zeros_like(y)
        for a in range(y.shape[1]):
            e = np.zeros(y.shape[1])
            e[a] = step
            out[:, a] = (self._rem(y + e) - self._rem(y - e)) / (2 * step)
        return out

    def __call__(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.scale * self.kernel(y) + self._rem(y)

    def grad(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.scale * self.kernel.grad(y) + self._rem_grad(y)

    def raw(self, y):
        """Green function with pole strength (n-2) sigma_{n-1}."""
        return self(y) / self.scale


def _tag_and_scale(kind):
    # raw G ~ 2|y|^{2-n} at boundary centers, ~|y-x0|^{2-n} elsewhere
    return {"boundary": (1.0, 0.5), "tubular": (0.5, 0.5), "interior": (1.0, 1.0)}[kind]


def assemble_green(chart: Chart, grid: Grid | None, x0, rho0: float = 0.25, k_max: int | None = None,
                   solver_tol: float = 1e-12, check: bool = True) -> GreenTable:
    """Green function with pole x0, B_g G = 0 on the physical face.

    Flat charts model the half-space (or R^n) and are returned in closed form.
    Otherwise G = F_k + u with F_k = K + sum_j int Gamma_j K and L u = -kappa
    Gamma_{k+1}, B u = -B F_k, u = -F_k on artificial faces (so G vanishes there).
    """
    x0 = np.asarray(x0, dtype=float)
    n = chart.n
    kind = center_kind(chart, x0, rho0)
    tag, scale = _tag_and_scale(kind)
    if chart.flat:
        plane = _physical_plane(chart)
        K = Kernel(n, x0, "K1", _reflect(x0, plane) if plane is not None else None, rho0, plane)
        if kind == "interior":
            tag, scale = (0.5, 0.5) if plane is not None else (1.0, 1.0)
            kind = "tubular" if plane is not None else "interior"
        return GreenTable(x0, K, None, tag, scale, kind, checks=dict(bg_residual=0.0, min_G=np.nan))
    if grid is None:
        raise ValueError("non-flat charts need a grid")
    k_max = n if k_max is None else k_max
    op = ConformalOperator(chart, grid, "appendixB")
    lam = coercivity_probe(op)
    if lam <= 1e-12:
        raise SolvabilityError(f"operator not coercive (probe eigenvalue {lam:.3e})", lam)
    chain = giraud_chain(chart, grid, x0, k_max + 1, rho0)
    X = grid.points().reshape(-1, n)
    Kx = chain.kernel(X)
    k0, dist = _node_index(grid, x0)
    pole = dist < 1e-12
    if pole:
        Kx[k0] = 0.0
    conv = np.sum(chain.convolutions[:k_max], axis=0) if k_max else np.zeros(len(X))
    F = Kx + conv
    # boundary data: -B F = (2/c_n) H F, since every kernel in F is Neumann on the face
    fbar = None
    if chart.physical:
        face = chart.physical[0]
        sl = grid.face_slice(*face)
        fbar = BoundaryField({face: (2.0 / c_n(n)) * op.H[face] * F.reshape(grid.shape)[sl]})
    rhs = -kappa(n) * chain.gammas[k_max].values
    u = solve_bvp(op, rhs, fbar, dirichlet=-F.reshape(grid.shape), check=False, tol=solver_tol)
    Graw = F + u.values.ravel()
    rem = scale * (conv + u.values.ravel())
    table = GreenTable(x0, chain.kernel, Field(rem.reshape(grid.shape), grid), tag, scale, kind, chain)
    if check:
        _, rb = system_residual(op, u, rhs, fbar)
        dn = _face_normal_derivative_of_F(chart, grid, chain, k_max, X)
        kindarr = grid.classify().ravel()
        ok = kindarr != ARTIFICIAL
        if pole:
            ok[k0] = False
        Gs = scale * Graw[ok]
        imin = int(np.argmin(Gs))
        table.checks = dict(bg_residual=float(rb + dn), solver_boundary=float(rb),
                            kernel_normal_derivative=float(dn), min_G=float(Gs[imin]),
                            coercivity=float(lam))
        if Gs[imin] <= 0:
            node = np.unravel_index(np.flatnonzero(ok)[imin], grid.shape)
            raise PositivityError("Green function not positive (under-resolved?)", node=node)
    return table


def _face_normal_derivative_of_F(chart, grid, chain: GiraudChain, k_max, X) -> float:
    """max |d_n F_k| on the physical face from the analytic kernels, with the
    source densities sum_j Gamma_j as Simpson-weighted point sources."""
    if not chart.physical:
        return 0.0
    a, side = chart.physical[0]
    n = chart.n
    fmask = np.zeros(grid.shape, bool)
    fmask[grid.face_slice(a, side)] = True
    fi = np.flatnonzero(fmask.ravel() & (grid.classify().ravel() != ARTIFICIAL))
    plane = _physical_plane(chart)
    Y = X[fi]
    dn = chain.kernel.grad(Y)[:, a]
    dn = np.where(np.isfinite(dn), dn, 0.0)
    Xs = _reflect(X, plane)
    W = (tensor_weights(grid.axes) * volume_density(chart, grid)).ravel()
    src = np.zeros(len(X))
    for gk in chain.gammas[:k_max]:
        src += gk.values.ravel() * W
    Az = _sqrt_metric(chart.g(X))
    for j, y in enumerate(Y):
        _, g, _ = _pair_jet(np.broadcast_to(y, X.shape), X, Xs, Az, n)
        ga = g[:, a]
        ga[~np.isfinite(ga)] = 0.0
        dn[j] += float(src @ ga)
    return float(np.max(np.abs(dn))) if len(dn) else 0.0


# ---------------------------------------------------------------------------
# reproducing formula

def _fd_jet(phi, pts, h=1e-4):
    pts = np.atleast_2d(pts)
    P, n = pts.shape
    v = phi(pts)
    g = np.zeros((P, n))
    H = np.zeros((P, n, n))
    E = np.eye(n) * h
    for a in range(n):
        fp, fm = phi(pts + E[a]), phi(pts - E[a])
        f2p, f2m = phi(pts + 2 * E[a]), phi(pts - 2 * E[a])
        g[:, a] = (8 * (fp - fm) - (f2p - f2m)) / (12 * h)
        H[:, a, a] = (16 * (fp + fm) - (f2p + f2m) - 30 * v) / (12 * h * h)
        for b in range(a + 1, n):
            fpp = phi(pts + E[a] + E[b])
            fpm = phi(pts + E[a] - E[b])
            fmp = phi(pts - E[a] + E[b])
            fmm = phi(pts - E[a] - E[b])
            H[:, a, b] = H[:, b, a] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return v, g, H


def _L_phi(chart, phi, pts):
    geo = _geometry_at(chart, pts)
    v, g, H = _fd_jet(phi, pts)
    return _apply_L(geo, v, g, H, chart.n)


def _B_phi(chart, phi, pts):
    """d_eta phi - (2/c_n) H phi on the physical face (diagonal-block metric)."""
    a, side = chart.physical[0]
    n = chart.n
    gm = chart.g(pts)
    ginv = np.linalg.inv(gm)
    v, g, _ = _fd_jet(phi, pts)
    sgn = 1.0 if side == 0 else -1.0
    eta = sgn * ginv[:, a, :] / np.sqrt(ginv[:, a, a])[:, None]
    Hc = mean_curvature(chart, pts) if not chart.flat else np.zeros(len(pts))
    return np.einsum("pa,pa->p", eta, g) - (2.0 / c_n(n)) * Hc * v


def _face_density(chart, pts, a):
    tang = [b for b in range(chart.n) if b != a]
    gm = chart.g(pts)[:, tang][:, :, tang]
    return np.sqrt(np.linalg.det(gm))


@dataclass
class ReproducingCheck:
    lhs: float
    rhs: float
    rel_err: float


def reproducing_check(table: GreenTable, chart: Chart, grid: Grid, phi: Callable,
                      m: int = 10) -> ReproducingCheck:
    """Compare -int G L phi - int_bdry G B phi with (n-2) sigma_{n-1} phi(x0).

    phi must vanish to second order on artificial faces (G = 0 there).  The
    kernel part is integrated with pyramid rules apexed at x0, the remainder
    with the grid trapezoid rule."""
    n = chart.n
    x0 = table.center
    s = table.scale
    # volume: kernel part
    rule = box_rule_singular(chart.lo, chart.hi, x0, m)
    dens = np.sqrt(np.linalg.det(chart.g(rule.nodes)))
    vol = rule.integrate(table.kernel(rule.nodes) * _L_phi(chart, phi, rule.nodes) * dens)
    # volume: remainder part (stored remainder is scaled, so divide)
    X = grid.points().reshape(-1, n)
    # Simpson weights: the trapezoid end error at the physical face is O(h^2)
    W = (tensor_weights(grid.axes) * volume_density(chart, grid)).ravel()
    rem = table.remainder.values.ravel() / s if isinstance(table.remainder, Field) else table._rem(X) / s
    vol += float(np.dot(W * rem, _L_phi(chart, phi, X)))
    bd = 0.0
    if chart.physical:
        a, side = chart.physical[0]
        lev = chart.lo[a] if side == 0 else chart.hi[a]
        tang = [b for b in range(n) if b != a]
        frule = box_rule_singular(chart.lo[tang], chart.hi[tang], x0[tang], m)
        P = np.zeros((len(frule.weights), n))
        P[:, tang] = frule.nodes
        P[:, a] = lev
        bd += frule.integrate(table.kernel(P) * _B_phi(chart, phi, P) * _face_density(chart, P, a))
        sl = grid.face_slice(a, side)
        fp = grid.points()[sl].reshape(-1, n)
        bw = (tensor_weights([grid.axes[b] for b in tang]).ravel()
              * _face_density(chart, fp, a))
        remf = (rem.reshape(grid.shape)[sl]).ravel()
        bd += float(np.dot(bw * remf, _B_phi(chart, phi, fp)))
    lhs = -vol - bd
    rhs = kappa(n) * float(phi(x0[None, :])[0])
    return ReproducingCheck(lhs, rhs, abs(lhs - rhs) / abs(rhs))


def bump_test_functions(chart: Chart):
    """Three smooth test functions vanishing to third order on artificial faces."""
    n = chart.n
    phys = set(chart.physical)
    lo, hi = chart.lo, chart.hi

    def bump(x):
        b = np.ones(len(x))
        for a in range(n):
            c, w = 0.5 * (lo[a] + hi[a]), 0.5 * (hi[a] - lo[a])
            t = (x[:, a] - c) / w
            if (a, 0) in phys and (a, 1) not in phys:
                t = (x[:, a] - lo[a]) / (hi[a] - lo[a])
            elif (a, 1) in phys and (a, 0) not in phys:
                t = (hi[a] - x[:, a]) / (hi[a] - lo[a])
            elif (a, 0) in phys and (a, 1) in phys:
                continue
            b = b * np.clip(1 - t * t, 0, None) ** 3
        return b

    last = n - 1
    return [
        bump,
        lambda x: bump(x) * (1.0 + 0.5 * x[:, 0]),
        lambda x: bump(x) * (1.0 + x[:, last] + 0.3 * x[:, 0] * x[:, 1 % n]),
    ]


# ---------------------------------------------------------------------------
# expansion check

@dataclass
class ExpansionProfile:
    r: np.ndarray
    error: np.ndarray
    envelope: np.ndarray
    C: float
    depth_coef: float = np.nan


def expansion_check(table: GreenTable, n_dirs: int = 6, radii=None) -> ExpansionProfile:
    """Radial profile of max |G - |y - x0|^{2-n}| over upper-half directions,
    with the envelope C(1 + |log r|) (n = 3, 4) or C r^{3-n} (n >= 5), plus a
    r^{1-n} term for tube centers whose fitted coefficient tracks the depth d(x0)."""
    n = table.n
    x0 = table.center
    radii = np.geomspace(0.05, 0.4, 8) if radii is None else np.asarray(radii, float)
    dirs, _ = hemisphere_rule(n, max(2, n_dirs // 2))
    plane = table.kernel.plane
    depth = _depth_from_kernel(table)
    err = []
    for r in radii:
        pts = x0[None, :] + r * dirs
        if plane is not None:
            a, lev = plane
            pts = pts[pts[:, a] >= lev]
        e = table(pts) - np.linalg.norm(pts - x0, axis=1) ** (2 - n)
        err.append(float(np.max(np.abs(e))))
    err = np.asarray(err)
    base = 1 + np.abs(np.log(radii)) if n in (3, 4) else radii ** (3 - n)
    if table.kind == "tubular":
        # the r^{-n} column absorbs the O(d^2) part of the image pair
        A = np.stack([base, radii ** (1 - n), radii ** (-n)], axis=1)
        coef = np.linalg.lstsq(A, err, rcond=None)[0]
        C = float(max(np.max(err / (base + depth * radii ** (1 - n))), 0.0))
        return ExpansionProfile(radii, err, C * (base + depth * radii ** (1 - n)), C, float(coef[1]))
    C = float(np.max(err / base))
    return ExpansionProfile(radii, err, C * base, C)


def _depth_from_kernel(table: GreenTable) -> float:
    if table.kernel.plane is None:
        return np.inf
    a, lev = table.kernel.plane
    return abs(float(table.center[a]) - lev)


# ---------------------------------------------------------------------------
# flux integral I(x0, rho)

def kelvin_green(w: Callable, n: int) -> GreenTable:
    """Boundary-center Green function G(x) = |x|^{2-n} w(x/|x|^2) of the flat
    half-space whose inversion gives w^{4/(n-2)} delta at infinity."""
    K = Kernel(n, np.zeros(n), "K1", None, 1.0, (n - 1, 0.0))

    def rem(x):
        x = np.atleast_2d(x)
        r2 = np.sum(x * x, axis=1)
        return r2 ** ((2 - n) / 2) * (w(x / r2[:, None]) - 1.0)
    return GreenTable(np.zeros(n), K, rem, 1.0, 1.0, "boundary")


def _log_metric(chart: Chart, pts):
    g = chart.g(pts)
    lam, V = np.linalg.eigh(g)
    return np.einsum("pab,pb,pcb->pac", V, np.log(lam), V)


@dataclass
class FluxReport:
    rho: np.ndarray
    I: np.ndarray
    cauchy: np.ndarray
    extrapolated: float
    order: float


def flux_I_at(chart: Chart, green: GreenTable, rho: float, m: int = 16, h=None) -> float:
    n = chart.n
    x0 = green.center
    dirs, wts = hemisphere_rule(n, m)
    x = rho * dirs
    pts = x0[None, :] + x
    if np.any(pts < chart.lo - 1e-12) or np.any(pts > chart.hi + 1e-12):
        raise DomainError("rho exceeds the chart")
    r = rho
    G = green(pts)
    dG = green.grad(pts)
    xa = dirs
    p = r ** (2 - n)
    dp = (2 - n) * r ** (1 - n)  # radial derivative of |x|^{2-n}
    first = p * np.einsum("pa,pa->p", dG, xa) - dp * G
    # h = log g and its divergence-type terms
    h = h or 1e-3 * rho
    hab = _log_metric(chart, pts)
    dh = np.zeros((len(pts), n, n, n))  # dh[p, c, a, b] = d_c h_ab
    for c in range(n):
        e = np.zeros(n)
        e[c] = h
        dh[:, c] = (8 * (_log_metric(chart, pts + e) - _log_metric(chart, pts - e))
                    - (_log_metric(chart, pts + 2 * e) - _log_metric(chart, pts - 2 * e))) / (12 * h)
    div = np.einsum("pbab->pa", dh)
    second = r ** (2 - 2 * n) * (r * r * np.einsum("pa,pa->p", div, xa)
                                 - 2 * n * np.einsum("pb,pab,pa->p", x, hab, xa))
    area = rho ** (n - 1)
    return float(c_n(n) * area * np.dot(wts, first) - area * np.dot(wts, second))


def flux_I(chart: Chart, green: GreenTable, rhos, m: int = 16) -> FluxReport:
    rhos = np.asarray(sorted(rhos), dtype=float)
    vals = np.array([flux_I_at(chart, green, r, m) for r in rhos])
    cauchy = np.abs(np.diff(vals))
    ext, order = _extrapolate(rhos, vals, toward="zero")
    return FluxReport(rhos, vals, cauchy, ext, order)


# ---------------------------------------------------------------------------
# mass

@dataclass
class MassResult:
    radii: np.ndarray
    flux: np.ndarray
    extrapolated: float
    order_estimate: float
    warning: str | None = None

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        if len(self.radii) < 3:
            raise ValueError("extrapolation needs at least 3 radii")
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must be strictly increasing")

    def rows(self):
        return [dict(R=float(r), flux=float(f), extrapolated=self.extrapolated,
                     order_estimate=self.order_estimate) for r, f in zip(self.radii, self.flux)]


MASS_COLUMNS = ("R", "flux", "extrapolated", "order_estimate")


def _extrapolate(x, f, toward="infinity"):
    """Fit f = f_lim + a s^q with s = 1/x (toward infinity) or s = x (toward 0)."""
    x = np.asarray(x, float)
    f = np.asarray(f, float)
    scale = max(1.0, float(np.max(np.abs(f))))
    if np.ptp(f) <= 1e-12 * scale or len(x) < 3:
        return float(f[-1] if toward == "infinity" else f[0]), np.inf
    s = 1.0 / x if toward == "infinity" else x
    s0 = float(np.max(s))
    t = s / s0
    lim0 = f[np.argmin(s)]
    a0 = f[np.argmax(s)] - lim0
    model = lambda t, m, a, q: m + a * t ** q
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            popt, _ = curve_fit(model, t, f, p0=(lim0, a0, 1.0), bounds=([-np.inf, -np.inf, 0.05],
                                                                         [np.inf, np.inf, 8.0]),
                                maxfev=20000)
        return float(popt[0]), float(popt[2])
    except (RuntimeError, ValueError):
        return float(lim0), np.nan


def _flux_density(chart: Chart, pts, normals, hfd):
    """sum_ab (g_ab,b - g_bb,a) nu_a at points."""
    _, dg, _ = metric_derivatives(chart, pts, hfd)  # dg[p, c, a, b]
    t1 = np.einsum("pbab->pa", dg)
    t2 = np.einsum("pabb->pa", dg)
    return np.einsum("pa,pa->p", t1 - t2, normals)


def _mass_sphere(chart: Chart, R: float, half: bool, m: int) -> float:
    n = chart.n
    dirs, w = hemisphere_rule(n, m) if half else sphere_rule(n, m)
    pts = R * dirs
    return float(R ** (n - 1) * np.dot(w, _flux_density(chart, pts, dirs, 1e-3 * R)))


def _boundary_ring(chart: Chart, R: float, m: int) -> float:
    """sum_i int_{y_n = 0, |y| = R} g_ni y_i/|y| over the (n-2)-sphere."""
    n = chart.n
    dirs, w = sphere_rule(n - 1, m)
    pts = np.zeros((len(dirs), n))
    pts[:, : n - 1] = R * dirs
    g = chart.g(pts)
    val = np.einsum("pi,pi->p", g[:, n - 1, : n - 1], dirs)
    return float(R ** (n - 2) * np.dot(w, val))


def _mass_result(chart, radii, fluxes):
    n = chart.n
    ext, q = _extrapolate(radii, fluxes, "infinity")
    warn = None
    if np.isfinite(q) and q <= (n - 2) / 2:
        warn = f"decay order {q:.3g} <= (n-2)/2: mass may be ill-posed"
    return MassResult(np.asarray(radii, float), np.asarray(fluxes), ext, q, warn)


def adm_mass(chart: Chart, radii, m: int = 16) -> MassResult:
    """Raw ADM flux sum_ab int_{|y|=R} (g_ab,b - g_bb,a) y_a/|y| and its R -> inf limit."""
    radii = np.asarray(radii, dtype=float)
    fl = [_mass_sphere(chart, R, False, m) for R in radii]
    return _mass_result(chart, radii, fl)


def boundary_mass(chart: Chart, radii, m: int = 16, include_ring: bool = True) -> MassResult:
    """Hemisphere flux plus the ring integral of g_ni y_i/|y| on the boundary plane."""
    radii = np.asarray(radii, dtype=float)
    fl = []
    for R in radii:
        v = _mass_sphere(chart, R, True, m)
        if include_ring:
            v += _boundary_ring(chart, R, m)
        fl.append(v)
    return _mass_result(chart, radii, fl)


def rotated_chart(chart: Chart, Q) -> Chart:
    """Pull back by y -> Q y: g'(y) = Q^T g(Q y) Q (Q orthogonal)."""
    Q = np.asarray(Q, dtype=float)

    def metric(y):
        y = np.asarray(y, dtype=float)
        g = chart.g(y @ Q.T)
        return np.einsum("ai,...ab,bj->...ij", Q, g, Q)
    return Chart(chart.n, chart.lo, chart.hi, metric, chart.physical, name=f"rotated({chart.name})",
                 params=dict(chart.params))


def half_space_gauge_chart(n: int = 3, a: float = 1.0, r_out: float = 400.0) -> Chart:
    """Half-space metric with g_ni = g_in = a y_i/|y|^2 (i < n), otherwise delta."""
    def metric(y):
        y = np.asarray(y, dtype=float)
        r2 = np.sum(y * y, axis=-1)
        g = np.broadcast_to(np.eye(n), y.shape[:-1] + (n, n)).copy()
        for i in range(n - 1):
            g[..., n - 1, i] = g[..., i, n - 1] = a * y[..., i] / r2
        return g
    lo = np.full(n, -r_out)
    lo[-1] = 0.0
    return Chart(n, lo, np.full(n, r_out), metric, [(n - 1, 0)], name="half_space_gauge",
                 params=dict(a=a))
