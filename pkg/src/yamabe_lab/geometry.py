"""Charts, grids, fields, curvature from metric components, boundary geometry
and quadrature on structured grids.

Metric evaluators are vectorised: ``metric(x)`` takes points of shape (..., n)
and returns components of shape (..., n, n).  All curvature quantities are
built from 4th-order finite differences of the metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .quadrature import trapezoid_weights

INTERIOR, BOUNDARY, ARTIFICIAL = 0, 1, 2


class SingularMetricError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class Chart:
    """Coordinate box with a metric.

    ``physical`` lists faces (axis, side) that belong to the boundary of M
    (side 0 = lower, 1 = upper); every other face is an artificial chart edge.
    ``conformal`` optionally gives w with g = w^{4/(n-2)} delta.
    """
    n: int
    lo: np.ndarray
    hi: np.ndarray
    metric: Callable[[np.ndarray], np.ndarray]
    physical: tuple = ()
    conformal: Callable | None = None
    fermi: bool = False
    flat: bool = False
    extendable: bool = True
    name: str = "chart"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.n < 3:
            raise ValueError("dimension must be >= 3")
        if self.lo.shape != (self.n,) or np.any(self.hi <= self.lo):
            raise ValueError("bad chart box")
        self.physical = tuple(sorted(set(tuple(f) for f in self.physical)))

    @property
    def has_boundary(self) -> bool:
        return len(self.physical) > 0

    def face_of(self, x, tol=1e-9):
        """Physical face containing x, or None."""
        x = np.asarray(x, dtype=float)
        for axis, side in self.physical:
            bound = self.lo[axis] if side == 0 else self.hi[axis]
            if abs(x[axis] - bound) <= tol * max(1.0, abs(bound)):
                return axis, side
        return None

    def g(self, x):
        return np.asarray(self.metric(np.asarray(x, dtype=float)), dtype=float)


# ----------------------------------------------------------------------------
# chart catalog

def _flat_metric(n):
    eye = np.eye(n)

    def metric(x):
        x = np.asarray(x)
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()
    return metric


def _conformal_metric(n, w):
    eye = np.eye(n)

    def metric(x):
        f = w(np.asarray(x, dtype=float)) ** (4.0 / (n - 2))
        return f[..., None, None] * eye
    return metric


def conformal_chart(base: Chart, w: Callable, name: str | None = None) -> Chart:
    """Chart with metric w^{4/(n-2)} g_base on the same box."""
    n = base.n
    p = 4.0 / (n - 2)

    def metric(x):
        return (w(np.asarray(x, dtype=float)) ** p)[..., None, None] * base.metric(x)
    cf = None
    if base.conformal is not None:
        cf = lambda x: w(x) * base.conformal(x)
    elif base.flat:
        cf = w
    return Chart(n, base.lo, base.hi, metric, base.physical, conformal=cf,
                 fermi=False, flat=False, name=name or f"conformal({base.name})")


def flat_box(n=3, lo=0.0, hi=1.0, physical="all") -> Chart:
    lo = np.full(n, lo, dtype=float) if np.isscalar(lo) else np.asarray(lo, float)
    hi = np.full(n, hi, dtype=float) if np.isscalar(hi) else np.asarray(hi, float)
    faces = [(a, s) for a in range(n) for s in (0, 1)] if physical == "all" else list(physical or ())
    return Chart(n, lo, hi, _flat_metric(n), faces, conformal=lambda x: np.ones(np.shape(x)[:-1]),
                 fermi=True, flat=True, name="flat_box", params=dict(lo=lo.tolist(), hi=hi.tolist()))


def flat_half_box(n=3, half_width=1.0, height=1.0) -> Chart:
    lo = np.r_[np.full(n - 1, -half_width), 0.0]
    hi = np.r_[np.full(n - 1, half_width), height]
    return Chart(n, lo, hi, _flat_metric(n), [(n - 1, 0)],
                 conformal=lambda x: np.ones(np.shape(x)[:-1]), fermi=True, flat=True,
                 name="flat_half_box", params=dict(half_width=half_width, height=height))


def _stereo_w(n, radius=1.0):
    # (2 r^2/(r^2+|x|^2))^2 delta = w^{4/(n-2)} delta
    def w(x):
        s = np.sum(np.asarray(x) ** 2, axis=-1)
        return (2 * radius ** 2 / (radius ** 2 + s)) ** ((n - 2) / 2)
    return w


def sphere_chart(n=3, extent=1.0, radius=1.0) -> Chart:
    """Stereographic chart of the round sphere of given radius; no boundary."""
    w = _stereo_w(n, radius)
    return Chart(n, np.full(n, -extent), np.full(n, extent), _conformal_metric(n, w), (),
                 conformal=w, name="sphere", params=dict(extent=extent, radius=radius))


def hemisphere_chart(n=3, extent=1.0, radius=1.0) -> Chart:
    """Stereographic chart in which {x_n = 0} is a great sphere (totally geodesic)."""
    w = _stereo_w(n, radius)
    lo = np.r_[np.full(n - 1, -extent), 0.0]
    hi = np.full(n, extent)
    return Chart(n, lo, hi, _conformal_metric(n, w), [(n - 1, 0)], conformal=w,
                 name="hemisphere", params=dict(extent=extent, radius=radius))


def schwarzschild_chart(n=3, mass=1.0, r_in=2.0, r_out=200.0, half=False) -> Chart:
    """Conformally flat Schwarzschild (1 + m/(2|y|^{n-2}))^{4/(n-2)} delta."""
    def w(x):
        r = np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1))
        return 1.0 + mass / (2.0 * r ** (n - 2))
    lo = np.full(n, -r_out)
    if half:
        lo[-1] = 0.0
    return Chart(n, lo, np.full(n, r_out), _conformal_metric(n, w),
                 [(n - 1, 0)] if half else (), conformal=w,
                 name="half_schwarzschild" if half else "schwarzschild",
                 params=dict(mass=mass, r_in=r_in, r_out=r_out))


def kappa_half_box(n=3, kappa=0.1, half_width=1.0, height=1.0) -> Chart:
    """Half-box with g = (1 + 2 kappa x_n) delta; boundary mean curvature -(n-1)kappa."""
    eye = np.eye(n)

    def metric(x):
        x = np.asarray(x, dtype=float)
        return (1 + 2 * kappa * x[..., -1])[..., None, None] * eye
    lo = np.r_[np.full(n - 1, -half_width), 0.0]
    hi = np.r_[np.full(n - 1, half_width), height]
    return Chart(n, lo, hi, metric, [(n - 1, 0)], name="kappa_half_box",
                 params=dict(kappa=kappa))


def metric_from_function(n, lo, hi, metric, physical=(), name="custom") -> Chart:
    return Chart(n, lo, hi, metric, physical, name=name)


CATALOG = {
    "flat_box": flat_box,
    "flat_half_box": flat_half_box,
    "sphere": sphere_chart,
    "hemisphere": hemisphere_chart,
    "schwarzschild": schwarzschild_chart,
    "half_schwarzschild": lambda **kw: schwarzschild_chart(half=True, **kw),
    "kappa_half_box": kappa_half_box,
}


def make_chart(name: str, **params) -> Chart:
    if name not in CATALOG:
        raise KeyError(f"unknown chart '{name}'")
    return CATALOG[name](**params)


# ----------------------------------------------------------------------------
# grids and fields

@dataclass
class Grid:
    """Tensor-product grid on a chart box; ``axes`` are 1D coordinate arrays."""
    chart: Chart
    axes: list
    weights1d: list
    uniform: bool = True

    @classmethod
    def uniform_grid(cls, chart: Chart, counts) -> "Grid":
        counts = [counts] * chart.n if np.isscalar(counts) else list(counts)
        if any(c < 2 for c in counts):
            raise ValueError("need at least 2 nodes per axis")
        axes = [np.linspace(chart.lo[a], chart.hi[a], counts[a]) for a in range(chart.n)]
        return cls(chart, axes, [trapezoid_weights(ax) for ax in axes], True)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def h(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def classify(self) -> np.ndarray:
        """0 interior, 1 physical boundary, 2 artificial edge (takes precedence)."""
        kind = np.zeros(self.shape, dtype=np.int8)
        n = self.chart.n
        phys = set(self.chart.physical)
        for a in range(n):
            for side, idx in ((0, 0), (1, -1)):
                sl = [slice(None)] * n
                sl[a] = idx
                if (a, side) in phys:
                    sub = kind[tuple(sl)]
                    sub[sub == INTERIOR] = BOUNDARY
                    kind[tuple(sl)] = sub
        for a in range(n):
            for side, idx in ((0, 0), (1, -1)):
                if (a, side) not in phys:
                    sl = [slice(None)] * n
                    sl[a] = idx
                    kind[tuple(sl)] = ARTIFICIAL
        return kind

    def face_slice(self, axis, side):
        sl = [slice(None)] * self.chart.n
        sl[axis] = 0 if side == 0 else -1
        return tuple(sl)

    def volume_weights(self) -> np.ndarray:
        w = self.weights1d[0]
        for wa in self.weights1d[1:]:
            w = np.multiply.outer(w, wa)
        return w


@dataclass
class Field:
    values: np.ndarray
    grid: Grid
    rank: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[: len(self.grid.shape)] != self.grid.shape:
            raise ValueError("field/grid mismatch")

    @classmethod
    def from_function(cls, f, grid: Grid, rank=0):
        return cls(f(grid.points()), grid, rank)


# ----------------------------------------------------------------------------
# finite-difference stencils (4th order)

_C1 = (np.array([-2, -1, 1, 2]), np.array([1, -8, 8, -1]) / 12.0)
_F1 = (np.arange(5), np.array([-25, 48, -36, 16, -3]) / 12.0)
_C2 = (np.array([-2, -1, 0, 1, 2]), np.array([-1, 16, -30, 16, -1]) / 12.0)
_F2 = (np.arange(6), np.array([45, -154, 214, -156, 61, -10]) / 12.0)


def _stencil(x_a, lo, hi, h, order):
    """Offsets/weights per point along one axis (central if room, else one-sided)."""
    central, forward = (_C1, _F1) if order == 1 else (_C2, _F2)
    reach = 2 * h
    eps = 1e-12 * max(1.0, abs(hi - lo)) if np.isfinite(hi - lo) else 0.0
    room_lo = x_a - reach >= lo - eps
    room_hi = x_a + reach <= hi + eps
    P = x_a.shape[0]
    S = len(forward[0])
    offs = np.zeros((P, S))
    wts = np.zeros((P, S))
    c = room_lo & room_hi
    offs[c, : len(central[0])] = central[0]
    wts[c, : len(central[0])] = central[1]
    f = ~c & ~room_lo
    offs[f] = forward[0]
    wts[f] = forward[1]
    b = ~c & room_lo
    offs[b] = -forward[0]
    wts[b] = forward[1] * (-1) ** order
    return offs, wts


def metric_derivatives(chart: Chart, x, h=1e-3):
    """g, dg[..., c, a, b] = d_c g_ab and ddg[..., c, d, a, b] at points x (P, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P, n = x.shape
    g = chart.g(x)
    # analytic metrics may be sampled beyond the box; otherwise close one-sidedly
    lo = chart.lo if not chart.extendable else np.full(n, -np.inf)
    hi = chart.hi if not chart.extendable else np.full(n, np.inf)
    st1 = [_stencil(x[:, a], lo[a], hi[a], h, 1) for a in range(n)]
    st2 = [_stencil(x[:, a], lo[a], hi[a], h, 2) for a in range(n)]
    dg = np.zeros((P, n, n, n))
    ddg = np.zeros((P, n, n, n, n))
    for a in range(n):
        offs, wts = st1[a]
        for s in range(offs.shape[1]):
            xs = x.copy()
            xs[:, a] += offs[:, s] * h
            dg[:, a] += wts[:, s, None, None] * chart.g(xs)
        dg[:, a] /= h
        offs, wts = st2[a]
        for s in range(offs.shape[1]):
            xs = x.copy()
            xs[:, a] += offs[:, s] * h
            ddg[:, a, a] += wts[:, s, None, None] * chart.g(xs)
        ddg[:, a, a] /= h * h
    for a in range(n):
        for b in range(a + 1, n):
            oa, wa = st1[a]
            ob, wb = st1[b]
            acc = np.zeros((P, n, n))
            for s in range(oa.shape[1]):
                for t in range(ob.shape[1]):
                    wgt = wa[:, s] * wb[:, t]
                    if not np.any(wgt):
                        continue
                    xs = x.copy()
                    xs[:, a] += oa[:, s] * h
                    xs[:, b] += ob[:, t] * h
                    acc += wgt[:, None, None] * chart.g(xs)
            ddg[:, a, b] = ddg[:, b, a] = acc / (h * h)
    # exact symmetry in (a, b)
    dg = 0.5 * (dg + np.swapaxes(dg, -1, -2))
    ddg = 0.5 * (ddg + np.swapaxes(ddg, -1, -2))
    return g, dg, ddg


def _inverse(g):
    det = np.linalg.det(g)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
        raise SingularMetricError("non-invertible metric")
    return np.linalg.inv(g)


def _christoffel_from(ginv, dg):
    # Gamma^a_bc = 1/2 g^ad (d_b g_dc + d_c g_db - d_d g_bc)
    lower = 0.5 * (np.einsum("pbdc->pdbc", dg) + np.einsum("pcdb->pdbc", dg) - dg)
    gam = np.einsum("pad,pdbc->pabc", ginv, lower)
    return 0.5 * (gam + np.swapaxes(gam, -1, -2))


def christoffel(chart: Chart, x, h=1e-3) -> np.ndarray:
    """Gamma^a_{bc} at x (single point -> (n,n,n); array of points -> (P,n,n,n))."""
    single = np.ndim(x) == 1
    g, dg, _ = metric_derivatives(chart, x, h)
    gam = _christoffel_from(_inverse(g), dg)
    return gam[0] if single else gam


def riemann_lower(chart: Chart, x, h=1e-3):
    """R_abcd (all indices down), with Ricci R_bd = g^{ac} R_abcd; returns (g, Rm)."""
    g, dg, ddg = metric_derivatives(chart, x, h)
    ginv = _inverse(g)
    gam = _christoffel_from(ginv, dg)
    # second-derivative part: 1/2 (g_ad,bc + g_bc,ad - g_ac,bd - g_bd,ac)
    t1 = np.einsum("pbcad->pabcd", ddg)
    t2 = np.einsum("padbc->pabcd", ddg)
    t3 = np.einsum("pbdac->pabcd", ddg)
    t4 = np.einsum("pacbd->pabcd", ddg)
    rm = 0.5 * (t1 + t2 - t3 - t4)
    rm += np.einsum("pef,pebc,pfad->pabcd", g, gam, gam)
    rm -= np.einsum("pef,pebd,pfac->pabcd", g, gam, gam)
    return g, ginv, rm


def scalar_curvature(chart: Chart, x, h=1e-3):
    single = np.ndim(x) == 1
    g, ginv, rm = riemann_lower(chart, x, h)
    ric = np.einsum("pac,pabcd->pbd", ginv, rm)
    R = np.einsum("pbd,pbd->p", ginv, ric)
    return R[0] if single else R


def weyl_tensor(chart: Chart, x, h=1e-3):
    """(W_abcd, |W|) at x; exact zero in dimension 3."""
    single = np.ndim(x) == 1
    n = chart.n
    P = np.atleast_2d(x).shape[0]
    if n == 3:
        W = np.zeros((P, 3, 3, 3, 3))
        nrm = np.zeros(P)
        return (W[0], 0.0) if single else (W, nrm)
    g, ginv, rm = riemann_lower(chart, x, h)
    ric = np.einsum("pac,pabcd->pbd", ginv, rm)
    R = np.einsum("pbd,pbd->p", ginv, ric)
    # Ricci is contracted on (1,3): R_bd; decomposition uses Ric_ac with the
    # same pairing, so W_abcd = R_abcd - (Ric wedge g) terms below.
    A = lambda T: (np.einsum("pac,pbd->pabcd", T, g) - np.einsum("pad,pbc->pabcd", T, g)
                   + np.einsum("pbd,pac->pabcd", T, g) - np.einsum("pbc,pad->pabcd", T, g))
    gg = np.einsum("pac,pbd->pabcd", g, g) - np.einsum("pad,pbc->pabcd", g, g)
    W = rm - A(ric) / (n - 2) + (R / ((n - 1) * (n - 2)))[:, None, None, None, None] * gg
    W_up = np.einsum("pai,pbj,pck,pdl,pijkl->pabcd", ginv, ginv, ginv, ginv, W)
    nrm = np.sqrt(np.maximum(np.einsum("pabcd,pabcd->p", W, W_up), 0.0))
    return (W[0], float(nrm[0])) if single else (W, nrm)


@dataclass
class BoundaryForms:
    second_form: np.ndarray
    H: float
    pi: np.ndarray
    pi_norm: float
    tangential: tuple


def boundary_forms(chart: Chart, x, h=1e-3) -> BoundaryForms:
    """Second fundamental form w.r.t. the inward unit normal (H > 0 for convex)."""
    x = np.asarray(x, dtype=float)
    face = chart.face_of(x)
    if face is None:
        raise DomainError("point is not on a physical boundary face")
    k, side = face
    n = chart.n
    g, dg, _ = metric_derivatives(chart, x[None], h)
    ginv = _inverse(g)
    gam = _christoffel_from(ginv, dg)[0]
    ginv = ginv[0]
    s = 1.0 if side == 0 else -1.0
    # eta_b = s delta_bk / sqrt(g^kk);  II_ij = eta_b Gamma^b_ij
    scale = s / np.sqrt(ginv[k, k])
    tang = tuple(a for a in range(n) if a != k)
    ii = scale * gam[k][np.ix_(tang, tang)]
    gamma_ind = g[0][np.ix_(tang, tang)]
    gi = np.linalg.inv(gamma_ind)
    H = float(np.einsum("ij,ij->", gi, ii))
    pi = ii - H / (n - 1) * gamma_ind
    pn = float(np.sqrt(max(np.einsum("ik,jl,ij,kl->", gi, gi, pi, pi), 0.0)))
    return BoundaryForms(ii, H, pi, pn, tang)


def mean_curvature(chart: Chart, x, h=1e-3) -> np.ndarray:
    """H at each point of an array of boundary points (vectorised)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.array([boundary_forms(chart, p, h).H for p in x])


def z_set_scan(chart: Chart, x0, radii, n_dirs: int = 6, h=1e-3):
    """Rows (r, sup d^{2-d}|W|, sup d^{1-d}|pi| or nan) over spheres d(x,x0)=r."""
    radii = list(radii)
    if not radii:
        raise ValueError("empty radii list")
    n = chart.n
    d = (n - 2) // 2
    x0 = np.asarray(x0, dtype=float)
    on_bdry = chart.face_of(x0) is not None
    from .quadrature import sphere_rule
    dirs, _ = sphere_rule(n, n_dirs)
    rows = []
    for r in radii:
        pts = x0 + r * dirs
        inside = np.all((pts >= chart.lo - 1e-12) & (pts <= chart.hi + 1e-12), axis=1)
        pts = pts[inside]
        if n == 3:
            wsup = 0.0
        else:
            _, wn = weyl_tensor(chart, pts, h)
            wsup = float(np.max(r ** (2 - d) * wn)) if len(pts) else 0.0
        psup = float("nan")
        if on_bdry:
            k, side = chart.face_of(x0)
            bd = dirs[np.abs(dirs[:, k]) < 1e-12]
            if len(bd) == 0:
                t = np.linspace(0, 2 * np.pi, 2 * n_dirs, endpoint=False)
                tang = [a for a in range(n) if a != k]
                bd = np.zeros((len(t), n))
                bd[:, tang[0]] = np.cos(t)
                bd[:, tang[1]] = np.sin(t)
            vals = [boundary_forms(chart, x0 + r * v, h).pi_norm for v in bd]
            psup = float(np.max(np.asarray(vals) * r ** (1 - d)))
        rows.append((float(r), wsup, psup))
    return rows


def integrate(field, chart: Chart, grid: Grid, region: str = "volume", face=None) -> float:
    """Tensor-product quadrature of f dv_g (volume) or f dsigma_g (boundary).

    ``field`` may be a Field or an array of node values.  For the boundary the
    sum runs over all physical faces unless ``face`` is given.
    """
    vals = field.values if isinstance(field, Field) else np.asarray(field, dtype=float)
    if vals.shape != grid.shape:
        raise ValueError("region/grid mismatch")
    if region == "volume":
        return float(np.sum(vals * grid.volume_weights() * volume_density(chart, grid)))
    if region != "boundary":
        raise ValueError("region must be 'volume' or 'boundary'")
    faces = [face] if face is not None else list(chart.physical)
    total = 0.0
    for axis, side in faces:
        total += float(np.sum(vals[grid.face_slice(axis, side)] * boundary_weights(chart, grid, axis, side)))
    return total


def volume_density(chart: Chart, grid: Grid) -> np.ndarray:
    if chart.flat:
        return np.ones(grid.shape)
    g = chart.g(grid.points())
    return np.sqrt(np.linalg.det(g))


def boundary_weights(chart: Chart, grid: Grid, axis: int, side: int) -> np.ndarray:
    """Quadrature weights times induced area density on one face."""
    tang = [a for a in range(chart.n) if a != axis]
    w = grid.weights1d[tang[0]]
    for a in tang[1:]:
        w = np.multiply.outer(w, grid.weights1d[a])
    if chart.flat:
        return w
    pts = grid.points()[grid.face_slice(axis, side)]
    g = chart.g(pts)[..., tang, :][..., :, tang]
    return w * np.sqrt(np.linalg.det(g))
