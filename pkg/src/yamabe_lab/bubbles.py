"""Bubbles U_eps, the cutoff chi_rho, glued test functions of kinds A/B/C,
their residuals and energies, the auxiliary function phi built from a vector
field V, and the boundary-flux quadratures for off-boundary centers.

Model coordinates y are chart coordinates relative to the center x0.  Kind A
sits on the boundary plane y_n = 0, kind B at height delta above the plane
y_n = -delta, kind C in the whole space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conformal import BoundaryField, ConformalOperator, c_n
from .functionals import EnergyReport, energy, q_hemisphere, y_sphere
from .geometry import ARTIFICIAL, Chart, Field, Grid, boundary_weights
from .polytensor import PolySpace, PolyTensor, degree_bound, poly_space
from .quadrature import (PointRule, ball_rule, gauss_panels, graded_breaks, radial_rule,
                         sphere_area, sphere_rule)


class GreenMissingError(ValueError):
    pass


class ConstraintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# U_eps and chi_rho

def u_epsilon(x, eps: float, n: int):
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return (eps / (eps ** 2 + r2)) ** ((n - 2) / 2)


@dataclass
class Jet:
    """Value, gradient, Hessian and Laplacian at a batch of points."""
    v: np.ndarray
    g: np.ndarray
    h: np.ndarray | None = None
    lap: np.ndarray | None = None
    lapg: np.ndarray | None = None  # Laplacian of the gradient


def bubble_jet(y, eps: float, n: int) -> Jet:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    k = (n - 2) / 2
    r2 = np.sum(y * y, axis=-1)
    w = eps ** 2 + r2
    ek = eps ** k
    U = ek * w ** (-k)
    g = (-2 * k * ek * w ** (-k - 1))[:, None] * y
    I = np.eye(n)
    h = (4 * k * (k + 1) * ek * w ** (-k - 2))[:, None, None] * y[:, :, None] * y[:, None, :] \
        - (2 * k * ek * w ** (-k - 1))[:, None, None] * I
    lap = ek * (4 * k * (k + 1) * w ** (-k - 2) * r2 - 2 * k * n * w ** (-k - 1))
    lapg = (ek * (-8 * k * (k + 1) * (k + 2) * w ** (-k - 3) * r2
                  + 4 * k * (k + 1) * (n + 2) * w ** (-k - 2)))[:, None] * y
    return Jet(U, g, h, lap, lapg)


_LO, _HI = 4.0 / 3.0, 5.0 / 3.0


def _chi_profile(t):
    """1 - smoothstep5(t) on [0, 1] and its first two t-derivatives."""
    t = np.clip(t, 0.0, 1.0)
    s = 1 - (6 * t ** 5 - 15 * t ** 4 + 10 * t ** 3)
    s1 = -(30 * t ** 4 - 60 * t ** 3 + 30 * t ** 2)
    s2 = -(120 * t ** 3 - 180 * t ** 2 + 60 * t)
    return s, s1, s2


def chi_rho(x, rho: float):
    """Cutoff: 1 on |x| <= 4rho/3, 0 on |x| >= 5rho/3, quintic smoothstep between."""
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return _chi_profile((r / rho - _LO) * 3.0)[0]


def chi_jet(y, rho: float) -> Jet:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = y.shape[-1]
    r = np.linalg.norm(y, axis=-1)
    s, s1, s2 = _chi_profile((r / rho - _LO) * 3.0)
    d1 = s1 * 3.0 / rho
    d2 = s2 * 9.0 / rho ** 2
    rs = np.where(r > 0, r, 1.0)
    yh = y / rs[:, None]
    g = d1[:, None] * yh
    I = np.eye(n)
    h = d2[:, None, None] * yh[:, :, None] * yh[:, None, :] \
        + (d1 / rs)[:, None, None] * (I - yh[:, :, None] * yh[:, None, :])
    lap = d2 + (n - 1) * d1 / rs
    return Jet(s, g, h, lap)


# ---------------------------------------------------------------------------
# flat Green functions

@dataclass
class FlatGreen:
    """Sum of weighted |y - p|^{2-n} poles; harmonic away from the poles."""
    n: int
    poles: np.ndarray
    weights: np.ndarray

    @classmethod
    def for_kind(cls, kind: str, n: int, delta: float = 0.0) -> "FlatGreen":
        z = np.zeros((1, n))
        if kind in ("A", "C"):
            return cls(n, z, np.ones(1))
        img = np.zeros((1, n))
        img[0, -1] = -2 * delta
        return cls(n, np.concatenate([z, img]), np.array([0.5, 0.5]))

    def jet(self, y) -> Jet:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        n = self.n
        v = np.zeros(len(y))
        g = np.zeros_like(y)
        h = np.zeros((len(y), n, n))
        I = np.eye(n)
        for p, wt in zip(self.poles, self.weights):
            d = y - p
            r = np.linalg.norm(d, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                v += wt * r ** (2 - n)
                g += (wt * (2 - n) * r ** (-n))[:, None] * d
                dh = d / r[:, None]
                h += (wt * (2 - n) * r ** (-n))[:, None, None] * (I - n * dh[:, :, None] * dh[:, None, :])
        return Jet(v, g, h, np.zeros(len(y)))

    def __call__(self, y):
        return self.jet(y).v


# ---------------------------------------------------------------------------
# polynomial vector fields and phi

@dataclass
class PolyVector:
    """V_a(x) = sum_alpha v_{a,alpha} x^alpha over PolySpace(n, deg)."""
    n: int
    deg: int
    coef: np.ndarray

    @property
    def space(self) -> PolySpace:
        return poly_space(self.n, self.deg)

    def boundary_violation(self) -> float:
        """max |coefficient| breaking V_n = 0 and d_n V_i = 0 on x_n = 0."""
        n = self.n
        bad = 0.0
        for m, a in enumerate(self.space.mono):
            if a[n - 1] == 0:
                bad = max(bad, abs(self.coef[n - 1, m]))
            if a[n - 1] == 1:
                bad = max(bad, float(np.max(np.abs(self.coef[: n - 1, m]), initial=0.0)))
        return bad

    def scaled(self, s: float) -> "PolyVector":
        """Coefficients of x -> s V(x / s)."""
        deg = self.space.total_degree().astype(float)
        return PolyVector(self.n, self.deg, self.coef * s ** (1 - deg))

    def jets(self, y):
        """V (P,n), dV (P,a,b)=d_b V_a, ddV (P,a,b,c)=d_b d_c V_a, lapV (P,a)."""
        sp_ = self.space
        E = sp_.eval_matrix(y)
        n = self.n
        V = E @ self.coef.T
        d1 = [sp_.deriv(self.coef, b) for b in range(n)]
        dV = np.stack([E @ d1[b].T for b in range(n)], axis=-1)
        ddV = np.stack([np.stack([E @ sp_.deriv(d1[b], c).T for c in range(n)], axis=-1)
                        for b in range(n)], axis=-2)
        lapV = np.einsum("pabb->pa", ddV)
        return V, dV, ddV, lapV


def strain(dV) -> np.ndarray:
    """S_ab = d_a V_b + d_b V_a - (2/n) div V delta_ab from dV[p, a, b] = d_b V_a."""
    n = dV.shape[-1]
    div = np.einsum("paa->p", dV)
    return dV + dV.transpose(0, 2, 1) - (2.0 / n) * div[:, None, None] * np.eye(n)


def phi_jet(y, eps: float, V: PolyVector) -> Jet:
    """phi = d_a U V_a + ((n-2)/(2n)) U div V with gradient and Laplacian."""
    n = V.n
    c = (n - 2) / (2 * n)
    B = bubble_jet(y, eps, n)
    Vv, dV, ddV, lapV = V.jets(y)
    div = np.einsum("paa->p", dV)
    ddiv = np.einsum("paab->pb", ddV)       # d_b div V
    lapdiv = np.einsum("paabb->p", _third(V, y))
    phi = np.einsum("pa,pa->p", B.g, Vv) + c * B.v * div
    grad = np.einsum("pab,pa->pb", B.h, Vv) + np.einsum("pa,pab->pb", B.g, dV) \
        + c * (B.g * div[:, None] + B.v[:, None] * ddiv)
    lap = np.einsum("pa,pa->p", B.lapg, Vv) + 2 * np.einsum("pab,pab->p", B.h, dV) \
        + np.einsum("pa,pa->p", B.g, lapV) \
        + c * (B.lap * div + 2 * np.einsum("pb,pb->p", B.g, ddiv) + B.v * lapdiv)
    return Jet(phi, grad, None, lap)


def _third(V: PolyVector, y):
    """d_b d_c d_e V_a at points: (P, a, b, c, e)."""
    sp_ = V.space
    n = V.n
    E = sp_.eval_matrix(y)
    out = np.zeros((len(E), n, n, n, n))
    for b in range(n):
        db = sp_.deriv(V.coef, b)
        for c_ in range(n):
            dbc = sp_.deriv(db, c_)
            for e in range(n):
                out[:, :, b, c_, e] = E @ sp_.deriv(dbc, e).T
    return out


def phi_rhs(y, eps: float, H: PolyTensor):
    """((n-2)/(4(n-1))) U d_b d_a H_ab + d_b(d_a U H_ab)."""
    n = H.n
    B = bubble_jet(y, eps, n)
    sp_ = H.space
    E = sp_.eval_matrix(y)
    Hv = np.einsum("abm,pm->pab", H.coef, E)
    dH = np.stack([np.einsum("abm,pm->pab", H.derivative(c), E) for c in range(n)], axis=-1)
    ddH = 0.0
    for a in range(n):
        for b in range(n):
            ddH = ddH + E @ sp_.deriv(sp_.deriv(H.coef[a, b], a), b)
    divH = np.einsum("pabb->pa", dH)
    return (n - 2) / (4 * (n - 1)) * B.v * ddH + np.einsum("pab,pab->p", B.h, Hv) \
        + np.einsum("pa,pa->p", B.g, divH)


def _strain_derivs(ddV, T3=None):
    """d_c S_ab as (P, a, b, c) and, when third derivatives are given, d_a d_b S_ab."""
    n = ddV.shape[-1]
    tr = np.einsum("paac->pc", ddV)
    dS = np.einsum("pbac->pabc", ddV) + ddV - (2.0 / n) * tr[:, None, None, :] * np.eye(n)[None, :, :, None]
    if T3 is None:
        return dS
    return dS, (2 - 2.0 / n) * np.einsum("paaee->p", T3)


def strain_rhs(y, eps: float, V: PolyVector):
    """RHS of the phi equation with H replaced by the strain S(V)."""
    n = V.n
    B = bubble_jet(y, eps, n)
    _, dV, ddV, _ = V.jets(y)
    S = strain(dV)
    dS, ddS = _strain_derivs(ddV, _third(V, y))
    divS = np.einsum("pabb->pa", dS)
    return (n - 2) / (4 * (n - 1)) * B.v * ddS + np.einsum("pab,pab->p", B.h, S) \
        + np.einsum("pa,pa->p", B.g, divS)


@dataclass
class PhiReport:
    phi: Callable
    residual: np.ndarray        # Delta phi + n(n+2) U^{4/(n-2)} phi - RHS(H) at sample points
    normal_derivative: np.ndarray  # d_n phi at boundary sample points
    points: np.ndarray
    boundary_points: np.ndarray


def phi_from_V(V: PolyVector | None, eps: float, rho: float, H: PolyTensor,
               points=None, boundary_points=None, tol: float = 1e-12) -> PhiReport:
    n = H.n
    if n == 3 or V is None:
        V = PolyVector(n, degree_bound(n) + 1, np.zeros((n, poly_space(n, degree_bound(n) + 1).M)))
    if V.boundary_violation() > tol:
        raise ConstraintError("V must satisfy V_n = 0 and d_n V_i = 0 on x_n = 0")
    rng = np.random.default_rng(0)
    if points is None:
        points = rng.uniform(-rho, rho, size=(64, n))
        points[:, -1] = np.abs(points[:, -1])
    if boundary_points is None:
        boundary_points = rng.uniform(-rho, rho, size=(32, n))
        boundary_points[:, -1] = 0.0
    J = phi_jet(points, eps, V)
    U = u_epsilon(points, eps, n)
    res = J.lap + n * (n + 2) * U ** (4 / (n - 2)) * J.v - phi_rhs(points, eps, H)
    Jb = phi_jet(boundary_points, eps, V)
    return PhiReport(lambda y: phi_jet(y, eps, V).v, res, Jb.g[:, -1], points, boundary_points)


def phi_envelope(y, eps: float, H: PolyTensor) -> np.ndarray:
    """eps^{(n-2)/2} sum_alpha sum_ij |h_ij,alpha| (eps+|y|)^{|alpha|+2-n}."""
    n = H.n
    deg = H.space.total_degree()
    habs = np.sum(np.abs(H.coef[: n - 1, : n - 1]), axis=(0, 1))
    r = np.linalg.norm(np.atleast_2d(y), axis=-1)
    out = np.zeros_like(r)
    for m in np.flatnonzero(habs):
        out += habs[m] * (eps + r) ** (deg[m] + 2 - n)
    return eps ** ((n - 2) / 2) * out


# ---------------------------------------------------------------------------
# test functions

@dataclass
class BubbleSpec:
    kind: str
    center: np.ndarray
    eps: float
    rho: float
    rbar_inf: float | None = None
    f: Callable | None = None          # conformal prefactor f_{x0}; 1 when None
    green: Callable | None = None      # G_{x0} evaluated at chart points
    V: PolyVector | None = None
    delta: float = 0.0                 # kind B: distance from center to the boundary plane
    C_B: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.kind not in ("A", "B", "C"):
            raise ValueError(f"unknown kind {self.kind}")
        if not (self.eps > 0 and self.rho > 0):
            raise ValueError("eps and rho must be positive")
        if not 2 * self.eps < self.rho:
            raise ValueError("need 2 eps < rho")
        if self.kind == "B":
            if not self.delta > 0:
                raise ValueError("kind B needs a positive depth delta")
            if self.delta > self.C_B * self.rho ** 2 * (1 + 1e-12):
                raise ValueError("kind B needs delta <= C_B rho^2")

    @property
    def n(self) -> int:
        return len(self.center)

    def rbar(self) -> float:
        n = self.n
        return 4 * n * (n - 1) if self.rbar_inf is None else self.rbar_inf

    def prefactor(self) -> float:
        n = self.n
        return (4 * n * (n - 1) / self.rbar()) ** ((n - 2) / 4)

    def model_green(self) -> FlatGreen:
        return FlatGreen.for_kind(self.kind, self.n, self.delta)


def glued_jet(spec: BubbleSpec, y, need_lap: bool = False) -> Jet:
    """Jet of the glued profile in model coordinates (flat Green function)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = spec.n
    k = (n - 2) / 2
    ek = spec.eps ** k
    B = bubble_jet(y, spec.eps, n)
    C = chi_jet(y, spec.rho)
    G = spec.model_green().jet(y)
    inner_v, inner_g = B.v, B.g
    inner_lap = B.lap
    if spec.V is not None and n > 3:
        P = phi_jet(y, spec.eps, spec.V)
        inner_v, inner_g, inner_lap = inner_v + P.v, inner_g + P.g, inner_lap + P.lap
    r = np.linalg.norm(y, axis=-1)
    plateau = r <= _LO * spec.rho
    with np.errstate(invalid="ignore"):
        D = inner_v - ek * G.v
        Dg = inner_g - ek * G.g
        v = np.where(plateau, inner_v, C.v * D + ek * G.v)
        g = np.where(plateau[:, None], inner_g, C.g * D[:, None] + C.v[:, None] * Dg + ek * G.g)
        lap = None
        if need_lap:
            lap = np.where(plateau, inner_lap,
                           C.lap * D + 2 * np.einsum("pa,pa->p", C.g, Dg) + C.v * inner_lap)
    P_ = spec.prefactor()
    return Jet(P_ * v, P_ * g, None, None if lap is None else P_ * lap)


def _model_coords(spec: BubbleSpec, X):
    return np.asarray(X, dtype=float) - spec.center


def _check_chart(spec: BubbleSpec, chart: Chart):
    if spec.green is None and not chart.flat:
        raise GreenMissingError("a GreenTable is required on non-flat charts")
    # the gluing region must stay inside the chart away from artificial faces
    for a in range(chart.n):
        for side, bound in ((0, chart.lo[a]), (1, chart.hi[a])):
            if (a, side) in chart.physical:
                continue
            if abs(spec.center[a] - bound) < 2 * spec.rho:
                raise ValueError("rho too large for chart")


def assemble_test_function(spec: BubbleSpec, chart: Chart, grid: Grid) -> Field:
    _check_chart(spec, chart)
    X = grid.points().reshape(-1, chart.n)
    y = _model_coords(spec, X)
    if spec.green is None:
        vals = glued_jet(spec, y).v
    else:
        n = chart.n
        k = (n - 2) / 2
        inner = bubble_jet(y, spec.eps, n).v
        if spec.V is not None and n > 3:
            inner = inner + phi_jet(y, spec.eps, spec.V).v
        chi = chi_rho(y, spec.rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            outer = spec.eps ** k * np.asarray(spec.green(X), dtype=float)
        vals = spec.prefactor() * np.where(chi >= 1.0, inner, chi * inner + (1 - chi) * outer)
    if spec.f is not None:
        vals = vals * spec.f(X)
    return Field(vals.reshape(grid.shape), grid)


# ---------------------------------------------------------------------------
# residuals

@dataclass
class InteriorResidual:
    field: Field
    lq_norm: float
    annulus_norm: float
    rest_norm: float


def residual_interior(spec: BubbleSpec, chart: Chart, grid: Grid,
                      method: str = "discrete") -> InteriorResidual:
    """(4(n-1)/(n-2)) Delta u - R u + Rbar u^{(n+2)/(n-2)} on the grid."""
    n = chart.n
    u = assemble_test_function(spec, chart, grid)
    op = ConformalOperator(chart, grid, "energy")
    if method == "analytic":
        if not chart.flat or spec.green is not None or spec.f is not None:
            raise ValueError("analytic residual needs the flat model")
        y = _model_coords(spec, grid.points().reshape(-1, n))
        lap = glued_jet(spec, y, need_lap=True).lap.reshape(grid.shape)
    else:
        lap = op.laplacian(u.values)
    uv = u.values
    res = c_n(n) * lap - op.R * uv + spec.rbar() * np.abs(uv) ** ((n + 2) / (n - 2))
    W = grid.volume_weights()
    q = 2 * n / (n + 2)
    y = _model_coords(spec, grid.points())
    r = np.linalg.norm(y, axis=-1)
    ann = (r >= spec.rho) & (r <= 2 * spec.rho)

    def nrm(mask):
        return float(np.sum(W[mask] * np.abs(res[mask]) ** q) ** (1 / q))

    full = np.ones_like(ann)
    return InteriorResidual(Field(res, grid), nrm(full), nrm(ann), nrm(~ann))


@dataclass
class BoundaryResidual:
    field: BoundaryField
    pos_max: float
    neg_max: float


def _bcoef(n):
    return 2 * (n - 1) / (n - 2)


def residual_boundary(spec: BubbleSpec, chart: Chart, grid: Grid) -> BoundaryResidual:
    """(2(n-1)/(n-2)) du/deta - H u on each physical face."""
    n = chart.n
    kind = grid.classify()
    faces = {}
    if spec.kind == "C" or not chart.has_boundary:
        for face in chart.physical:
            faces[face] = np.zeros(kind[grid.face_slice(*face)].shape)
        return BoundaryResidual(BoundaryField(faces), 0.0, 0.0)
    if chart.flat and spec.green is None and spec.f is None:
        X = grid.points()
        for (a, side) in chart.physical:
            sl = grid.face_slice(a, side)
            Xf = X[sl]
            jet = glued_jet(spec, (Xf - spec.center).reshape(-1, n))
            sign = 1.0 if side == 0 else -1.0
            faces[(a, side)] = _bcoef(n) * sign * jet.g[:, a].reshape(Xf.shape[:-1])
    else:
        u = assemble_test_function(spec, chart, grid)
        op = ConformalOperator(chart, grid, "energy")
        dn = op.normal_derivative(u.values)
        for face, v in dn.faces.items():
            faces[face] = _bcoef(n) * v - op.H[face] * u.values[grid.face_slice(*face)]
    pos = max((float(np.max(np.maximum(v, 0), initial=0.0)) for v in faces.values()), default=0.0)
    neg = max((float(np.max(np.maximum(-v, 0), initial=0.0)) for v in faces.values()), default=0.0)
    return BoundaryResidual(BoundaryField(faces), pos, neg)


def boundary_residual_profile(spec: BubbleSpec, xbar) -> np.ndarray:
    """Boundary residual of the flat model at boundary points (xbar, plane)."""
    n = spec.n
    xbar = np.atleast_2d(np.asarray(xbar, dtype=float))
    level = {"A": 0.0, "B": -spec.delta}.get(spec.kind)
    if level is None:
        return np.zeros(len(xbar))
    y = np.concatenate([xbar, np.full((len(xbar), 1), level)], axis=1)
    return _bcoef(n) * glued_jet(spec, y).g[:, -1]


def boundary_envelopes(spec: BubbleSpec, xbar):
    """(delta/eps)(eps/(eps^2+|xbar|^2))^{n/2} and (eps/(eps^2+|xbar|^2))^{(n-2)/2}."""
    n = spec.n
    s2 = np.sum(np.atleast_2d(xbar) ** 2, axis=-1)
    base = spec.eps / (spec.eps ** 2 + s2)
    return (spec.delta / spec.eps) * base ** (n / 2), base ** ((n - 2) / 2)


# ---------------------------------------------------------------------------
# energies by quadrature on the flat model

def _slab_rule(n, depth, scale, r_max, order, ratio, extra, sub_ang) -> PointRule:
    """Rule over {-depth <= y_n <= 0, |y| <= r_max} in cylindrical coordinates."""
    zb = graded_breaks(scale, depth, ratio, extra=())
    z, wz = gauss_panels(zb, order)
    z = -z
    dirs, wd = sphere_rule(n - 1, sub_ang) if n > 2 else (np.array([[1.0], [-1.0]]), np.ones(2))
    nodes, weights = [], []
    for zi, wzi in zip(z, wz):
        smax = np.sqrt(max(r_max ** 2 - zi ** 2, 0.0))
        s, ws = radial_rule(scale, smax, order, ratio, extra)
        pts = np.concatenate([(s[:, None, None] * dirs[None, :, :]),
                              np.full((len(s), len(dirs), 1), zi)], axis=2)
        ww = (wzi * ws * s ** (n - 2))[:, None] * wd[None, :]
        nodes.append(pts.reshape(-1, n))
        weights.append(ww.ravel())
    return PointRule(np.concatenate(nodes), np.concatenate(weights))


def model_rule(spec: BubbleSpec, r_max: float | None = None, order: int = 10, ang: int = 16,
               sub_ang: int = 2, ratio: float = 1.5) -> PointRule:
    """Quadrature over the model domain of `spec` (half-space for A/B, R^n for C)."""
    n = spec.n
    rho = spec.rho
    r_max = r_max or 200.0 * rho
    extra = (rho, _LO * rho, _HI * rho, 2 * rho)
    zero = np.zeros(n)
    if spec.kind == "C":
        return ball_rule(n, zero, spec.eps, r_max, None, order, ang, sub_ang, ratio, extra)
    upper = ball_rule(n, zero, spec.eps, r_max, 0.0, order, ang, sub_ang, ratio, extra)
    if spec.kind == "A":
        return upper
    slab = _slab_rule(n, spec.delta, spec.eps, r_max, order, ratio, extra, sub_ang)
    return PointRule(np.concatenate([upper.nodes, slab.nodes]),
                     np.concatenate([upper.weights, slab.weights]))


@dataclass
class BubbleEnergy:
    report: EnergyReport
    gap: float
    sharp: float


def model_energy(spec: BubbleSpec, rule: PointRule | None = None) -> BubbleEnergy:
    """E of the glued profile on the flat model with analytic far-field tails."""
    n = spec.n
    rule = rule or model_rule(spec)
    jet = glued_jet(spec, rule.nodes)
    q = 2 * n / (n - 2)
    num = c_n(n) * rule.integrate(np.sum(jet.g ** 2, axis=-1))
    lq = rule.integrate(np.abs(jet.v) ** q)
    # beyond r_max the profile is P eps^{(n-2)/2} |y|^{2-n} to leading order
    R = np.max(np.linalg.norm(rule.nodes, axis=-1))
    frac = 1.0 if spec.kind == "C" else 0.5
    amp = spec.prefactor() * spec.eps ** ((n - 2) / 2)
    sig = sphere_area(n) * frac
    num += c_n(n) * amp ** 2 * (n - 2) * R ** (2 - n) * sig
    lq += amp ** q * R ** (-n) / n * sig
    rep = EnergyReport.from_parts(num, lq, n)
    sharp = q_hemisphere(n) if spec.kind == "A" else y_sphere(n)
    return BubbleEnergy(rep, rep.E - sharp, sharp)


def energy_of_bubble(spec: BubbleSpec, chart: Chart | None = None, grid: Grid | None = None) -> BubbleEnergy:
    """Flat charts (or no chart) use the graded model quadrature; otherwise the grid energy."""
    n = spec.n
    sharp = q_hemisphere(n) if spec.kind == "A" else y_sphere(n)
    if chart is None or (chart.flat and spec.green is None and spec.f is None):
        return model_energy(spec)
    u = assemble_test_function(spec, chart, grid)
    rep = energy(chart, grid, u)
    return BubbleEnergy(rep, rep.E - sharp, sharp)


def model_residual_norm(spec: BubbleSpec, rule: PointRule | None = None):
    """L^{2n/(n+2)} norm of the interior residual over the model domain, total and on rho<=|y|<=2rho."""
    n = spec.n
    rule = rule or model_rule(spec)
    jet = glued_jet(spec, rule.nodes, need_lap=True)
    res = c_n(n) * jet.lap + spec.rbar() * np.abs(jet.v) ** ((n + 2) / (n - 2))
    q = 2 * n / (n + 2)
    r = np.linalg.norm(rule.nodes, axis=-1)
    ann = (r >= spec.rho) & (r <= 2 * spec.rho)
    tot = rule.integrate(np.abs(res) ** q) ** (1 / q)
    a = float(np.dot(rule.weights[ann], np.abs(res[ann]) ** q)) ** (1 / q)
    return float(tot), a


def kind_b_sweep(n: int, rho: float, ratios, C_B: float = 1.0, **rule_kw):
    """Energy deficit Y(S^n) - E for kind B at delta = C_B rho^2 / 2 over eps/delta ratios.

    Returns (rows, slope, c_tilde): slope of log(deficit) vs log(eps/delta) and
    the fitted constant deficit / (eps/delta)^{n-2} (median).
    """
    delta = C_B * rho ** 2 / 2
    rows = []
    for t in ratios:
        spec = BubbleSpec("B", np.zeros(n), t * delta, rho, delta=delta, C_B=C_B)
        be = model_energy(spec, model_rule(spec, **rule_kw))
        rows.append(dict(ratio=t, eps=t * delta, delta=delta, energy=be.report.E, deficit=-be.gap))
    x = np.log([r["ratio"] for r in rows])
    d = np.array([r["deficit"] for r in rows])
    slope = float(np.polyfit(x, np.log(d), 1)[0]) if np.all(d > 0) else float("nan")
    ct = float(np.median(d / np.exp(x) ** (n - 2)))
    return rows, slope, ct


# ---------------------------------------------------------------------------
# boundary-flux lemmas

def _patch_radius(delta, rho, kappa):
    """Largest s with s^2 + gamma(s)^2 <= rho^2 for gamma = -delta + kappa s^2."""
    if kappa == 0:
        return np.sqrt(max(rho ** 2 - delta ** 2, 0.0))
    a, b, c = kappa ** 2, 1 - 2 * kappa * delta, delta ** 2 - rho ** 2
    t = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return np.sqrt(max(t, 0.0))


def boundary_flux(eps: float, delta: float, rho: float, n: int, kappa: float = 0.0,
                  order: int = 12) -> float:
    """(4(n-1)/(n-2)) int over the graph patch y_n = -delta + kappa|ybar|^2, |y| <= rho,
    of U_eps dU_eps/dnu with nu the upward Euclidean normal."""
    if not eps < delta:
        raise ValueError("need eps < delta")
    smax = _patch_radius(delta, rho, kappa)
    s, w = radial_rule(min(eps, delta), smax, order, 1.5, extra=(delta,))
    gam = -delta + kappa * s ** 2
    dens = (n - 2) * eps ** (n - 2) * (eps ** 2 + s ** 2 + gam ** 2) ** (1 - n) * (delta + kappa * s ** 2)
    return c_n(n) * float(np.dot(w, dens * sphere_area(n - 1) * s ** (n - 2)))


def flux_sweep(n: int, delta: float, rho: float, ratios, kappa: float = 0.0):
    """Rows (eps, flux, scaled = (delta/eps)^{n-2} flux) and the log-log slope in eps."""
    rows = []
    for t in ratios:
        e = t * delta
        fl = boundary_flux(e, delta, rho, n, kappa)
        rows.append(dict(eps=e, delta=delta, flux=fl, scaled=fl * (delta / e) ** (n - 2)))
    x = np.log([r["eps"] for r in rows])
    slope = float(np.polyfit(x, np.log([r["flux"] for r in rows]), 1)[0])
    return rows, slope


def auxiliary_integral_bounds(eps: float, delta: float, rho: float, n: int,
                              kappa: float = 0.0, C0: float = 2.5, samples: int = 200) -> dict:
    """int_{|xbar|<=rho} (eps^2+|xbar|^2+delta^2)^{2-n} dxbar, its ratio to rho delta^{2-n},
    and the comparability ratio (eps^2+|xbar|^2+gamma^2)/(eps^2+|xbar|^2+delta^2) on
    |xbar| <= 1/(2 C0)."""
    if not (0 < delta <= rho):
        raise ValueError("need 0 < delta <= rho")
    s, w = radial_rule(max(min(eps, delta), 1e-300) if eps > 0 else delta, rho, 12, 1.5)
    I = float(np.dot(w, (eps ** 2 + s ** 2 + delta ** 2) ** (2 - n) * sphere_area(n - 1) * s ** (n - 2)))
    xs = np.linspace(0.0, 1.0 / (2 * C0), samples)
    gam = -delta + kappa * xs ** 2
    ratio = (eps ** 2 + xs ** 2 + gam ** 2) / (eps ** 2 + xs ** 2 + delta ** 2)
    return dict(integral=I, scaled=I / (rho * delta ** (2 - n)),
                comparability_min=float(ratio.min()), comparability_max=float(ratio.max()))


# ---------------------------------------------------------------------------
# weighted coefficient inequality

def q_tensor(y, eps: float, H: PolyTensor, V: PolyVector) -> np.ndarray:
    """Q_{ab,c} at points, shape (P, a, b, c), with T = H - S(V)."""
    n = H.n
    B = bubble_jet(y, eps, n)
    E = H.space.eval_matrix(y)
    Hv = np.einsum("abm,pm->pab", H.coef, E)
    dH = np.stack([np.einsum("abm,pm->pab", H.derivative(c), E) for c in range(n)], axis=-1)
    _, dV, ddV, _ = V.jets(y)
    S = strain(dV)
    dS = _strain_derivs(ddV)
    I = np.eye(n)
    T = Hv - S
    dT = dH - dS
    k = 2.0 / (n - 2)
    gU = B.g
    Q = B.v[:, None, None, None] * dT \
        - k * np.einsum("pa,pbc->pabc", gU, T) - k * np.einsum("pb,pac->pabc", gU, T) \
        + k * np.einsum("pd,pad,bc->pabc", gU, T, I) + k * np.einsum("pd,pbd,ac->pabc", gU, T, I)
    return Q


def v_basis(n: int, deg: int):
    """PolyVectors spanning {V : V_n = 0 and d_n V_i = 0 on x_n = 0}, degree 1..deg."""
    sp_ = poly_space(n, deg)
    out = []
    for m, a in enumerate(sp_.mono):
        if sum(a) == 0:
            continue
        for comp in range(n):
            ok = a[n - 1] != 1 if comp < n - 1 else a[n - 1] >= 1
            if ok:
                c = np.zeros((n, sp_.M))
                c[comp, m] = 1.0
                out.append(PolyVector(n, deg, c))
    return out


def galerkin_V(eps: float, rho: float, H: PolyTensor, r_max_factor: float = 60.0,
               sub_ang: int | None = None) -> PolyVector:
    """Polynomial least-squares fit of min int U^{2n/(n-2)} |chi H - S(V)|^2 over the
    half-space; its normal equations are the weak form of the V equation restricted
    to polynomial V with the boundary rows built in."""
    n = H.n
    deg = H.d + 1
    basis = v_basis(n, deg)
    sub_ang = sub_ang or deg + 3
    rule = ball_rule(n, np.zeros(n), eps, r_max_factor * rho, 0.0, order=8, ang=deg + 6,
                     sub_ang=sub_ang, ratio=1.6, extra=(_LO * rho, _HI * rho))
    y = rule.nodes
    wt = rule.weights * u_epsilon(y, eps, n) ** (2 * n / (n - 2))
    chi = chi_rho(y, rho)
    target = chi[:, None, None] * H(y)
    cols = []
    for b in basis:
        _, dV, _, _ = b.jets(y)
        cols.append(strain(dV).reshape(len(y), -1))
    A = np.stack(cols, axis=-1)  # (P, n*n, nb)
    G = np.einsum("pkb,pkc,p->bc", A, A, wt)
    rhs = np.einsum("pkb,pk,p->b", A, target.reshape(len(y), -1), wt)
    coef, *_ = np.linalg.lstsq(G, rhs, rcond=1e-12)
    total = sum(c * b.coef for c, b in zip(coef, basis))
    return PolyVector(n, deg, total)


@dataclass
class WeightedRatio:
    weighted_sum: float
    q_integral: float     # (1/4) int_{B_rho^+} Q_{ab,c} Q_{ab,c}
    ratio: float          # weighted_sum / q_integral
    lam: float            # largest lambda with the inequality on this sample


def propo5_constant(n: int, eps: float, rho: float, H: PolyTensor, V: PolyVector | None,
                    order: int = 8, sub_ang: int | None = None) -> WeightedRatio:
    """Empirical constant in lam eps^{n-2} sum |h|^2 int (eps+|x|)^{2|a|+2-2n} <= (1/4) int |Q|^2."""
    if V is None:
        raise ValueError("V is required")
    if rho < 2 * eps:
        raise ValueError("need rho >= 2 eps")
    deg = H.space.total_degree()
    h2 = H.coefficient_norm2()
    if not np.any(h2 > 0):
        return WeightedRatio(0.0, 0.0, 0.0, float("inf"))
    r, w = radial_rule(eps, rho, 12, 1.5)
    half = 0.5 * sphere_area(n)
    ws = 0.0
    for m in np.flatnonzero(h2):
        ws += h2[m] * half * float(np.dot(w, (eps + r) ** (2 * deg[m] + 2 - 2 * n) * r ** (n - 1)))
    ws *= eps ** (n - 2)
    sub_ang = sub_ang or V.deg + 3
    rule = ball_rule(n, np.zeros(n), eps, rho, 0.0, order=order, ang=V.deg + 6, sub_ang=sub_ang)
    Q = q_tensor(rule.nodes, eps, H, V)
    qi = 0.25 * rule.integrate(np.sum(Q ** 2, axis=(1, 2, 3)))
    ratio = ws / qi if qi > 0 else float("inf")
    return WeightedRatio(ws, qi, ratio, 1.0 / ratio if ratio > 0 else float("inf"))


SWEEP_COLUMNS = ["kind", "eps", "rho", "delta", "energy", "gap", "res_int_norm",
                 "res_bdry_pos", "res_bdry_neg"]


def sweep_row(spec: BubbleSpec, samples: int = 400) -> dict:
    be = model_energy(spec)
    tot, _ = model_residual_norm(spec)
    xb = np.zeros((samples, spec.n - 1))
    xb[:, 0] = np.linspace(0.0, 2 * spec.rho, samples)
    prof = boundary_residual_profile(spec, xb)
    return dict(kind=spec.kind, eps=spec.eps, rho=spec.rho, delta=spec.delta, energy=be.report.E,
                gap=be.gap, res_int_norm=tot, res_bdry_pos=float(np.max(np.maximum(prof, 0), initial=0.0)),
                res_bdry_neg=float(np.max(np.maximum(-prof, 0), initial=0.0)))
