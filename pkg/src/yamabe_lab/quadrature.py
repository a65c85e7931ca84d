"""Quadrature rules: trapezoid weights, Gauss-Legendre panels, graded radial
meshes and hyperspherical direction sets used by the bubble integrals."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gamma, roots_jacobi


def sphere_area(n: int) -> float:
    """Area of the unit sphere S^{n-1} in R^n (sigma_{n-1})."""
    return 2.0 * np.pi ** (n / 2) / gamma(n / 2)


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    w = np.zeros_like(x)
    if x.size < 2:
        return w
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def simpson_weights(x: np.ndarray) -> np.ndarray:
    """Composite Simpson weights on a uniform 1D grid (odd node count); falls
    back to the trapezoid rule otherwise."""
    x = np.asarray(x, dtype=float)
    if x.size < 3 or x.size % 2 == 0:
        return trapezoid_weights(x)
    h = x[1] - x[0]
    w = np.full(x.size, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * h / 3


def tensor_weights(axes, rule=simpson_weights) -> np.ndarray:
    w = rule(axes[0])
    for ax in axes[1:]:
        w = np.multiply.outer(w, rule(ax))
    return w


@lru_cache(maxsize=64)
def _leggauss(order: int):
    return np.polynomial.legendre.leggauss(order)


def gauss_panels(breaks, order: int = 8):
    """Composite Gauss-Legendre rule on consecutive intervals of `breaks`."""
    breaks = np.asarray(breaks, dtype=float)
    t, w = _leggauss(order)
    a, b = breaks[:-1, None], breaks[1:, None]
    nodes = 0.5 * (b - a) * t[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def graded_breaks(scale: float, r_max: float, ratio: float = 1.6, first: float = 0.25,
                  extra=()) -> np.ndarray:
    """Panel breakpoints 0 < scale*first*ratio^k < ... < r_max, plus forced breaks."""
    pts = [0.0]
    r = scale * first
    while r < r_max:
        pts.append(r)
        r *= ratio
    pts.append(r_max)
    pts.extend(e for e in extra if 0 < e < r_max)
    pts = np.unique(np.asarray(pts))
    # drop slivers created by forced breaks
    keep = np.concatenate([[True], np.diff(pts) > 1e-12 * max(r_max, 1.0)])
    return pts[keep]


def radial_rule(scale: float, r_max: float, order: int = 8, ratio: float = 1.6, extra=()):
    return gauss_panels(graded_breaks(scale, r_max, ratio, extra=extra), order)


def _angle_rule(lo: float, hi: float, m: int):
    t, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (hi - lo) * t + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def sphere_rule(dim: int, m: int = 8):
    """Product rule on S^{dim-1} in R^dim; returns (directions, weights).

    The last coordinate t = cos(theta_1) uses Gauss-Jacobi nodes for the weight
    (1-t^2)^{(dim-3)/2}, so polynomials in t are integrated exactly; remaining
    angles recurse.  Azimuth uses the periodic trapezoid rule with 2m points.
    """
    if dim == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if dim == 2:
        k = max(2 * m, 1)
        phi = 2 * np.pi * np.arange(k) / k
        return np.stack([np.cos(phi), np.sin(phi)], axis=1), np.full(k, 2 * np.pi / k)
    al = (dim - 3) / 2
    t, wt = roots_jacobi(m, al, al)
    sub, wsub = sphere_rule(dim - 1, m)
    s = np.sqrt(1 - t * t)
    dirs = np.concatenate([(s[:, None, None] * sub[None, :, :]),
                           np.broadcast_to(t[:, None, None], (m, len(sub), 1))], axis=2)
    w = wt[:, None] * wsub[None, :]
    return dirs.reshape(-1, dim), w.ravel()


@dataclass
class PointRule:
    """Nodes and weights in R^n for a ball, possibly cut by a plane x_n >= level."""
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def ball_rule(n: int, center, scale: float, r_max: float, plane: float | None = None,
              order: int = 8, ang: int = 12, sub_ang: int = 2, ratio: float = 1.6,
              extra=()) -> PointRule:
    """Quadrature over {|x-center| <= r_max} intersected with {x_n >= plane}.

    Radial direction: graded Gauss panels resolving `scale`.  Polar angle about
    the x_n axis: Gauss-Legendre split at the equator, with the lower half cut
    at the plane.  `sub_ang` controls the rule on the remaining S^{n-2} factor
    (small values are exact for integrands axisymmetric about the x_n axis).
    """
    center = np.asarray(center, dtype=float)
    c = np.inf if plane is None else center[-1] - plane
    if c < 0:
        raise ValueError("center lies below the cutting plane")
    sub, wsub = sphere_rule(n - 1, sub_ang)
    pieces = [(0.0, np.pi / 2)]
    if c > 0:
        pieces.append((np.pi / 2, np.pi))
    nodes, weights = [], []
    for lo, hi in pieces:
        th, wt = _angle_rule(lo, hi, ang)
        for t, w in zip(th, wt):
            ct = np.cos(t)
            r_end = r_max if ct >= 0 or not np.isfinite(c) else min(r_max, c / (-ct))
            r, wr = radial_rule(scale, r_end, order, ratio, extra)
            d = np.concatenate([np.sin(t) * sub, np.full((len(sub), 1), ct)], axis=1)
            pts = center[None, None, :] + r[:, None, None] * d[None, :, :]
            ww = (wr * r ** (n - 1))[:, None] * (w * np.sin(t) ** (n - 2) * wsub)[None, :]
            nodes.append(pts.reshape(-1, n))
            weights.append(ww.ravel())
    return PointRule(np.concatenate(nodes), np.concatenate(weights))


def disk_radial_rule(m: int, r_max: float, scale: float, order: int = 10, ratio: float = 1.5):
    """Rule for radial integrands over a ball in R^m: returns (r, w) with the
    r^{m-1} sigma_{m-1} Jacobian folded into w."""
    r, w = radial_rule(scale, r_max, order, ratio)
    return r, w * sphere_area(m) * r ** (m - 1)


def hemisphere_rule(dim: int, m: int = 12):
    """Rule on the upper half {x_dim >= 0} of S^{dim-1}: Gauss-Legendre in the
    polar angle on [0, pi/2] times the product rule on S^{dim-2}."""
    th, wt = _angle_rule(0.0, np.pi / 2, m)
    sub, wsub = sphere_rule(dim - 1, m)
    dirs = np.concatenate([np.sin(th)[:, None, None] * sub[None, :, :],
                           np.broadcast_to(np.cos(th)[:, None, None], (m, len(sub), 1))], axis=2)
    w = (wt * np.sin(th) ** (dim - 2))[:, None] * wsub[None, :]
    return dirs.reshape(-1, dim), w.ravel()


def box_rule_singular(lo, hi, apex, m: int = 10, t_scale: float | None = None) -> PointRule:
    """Rule on the box [lo, hi] for integrands singular like |x - apex|^{2-dim}.

    The box is split into pyramids with the apex as tip and one box face as
    base; on each pyramid x = apex + t (p - apex) with p on the face, whose
    Jacobian t^{dim-1} D removes the singularity.  Faces through the apex
    carry no volume and are skipped.  Works in any dimension >= 1.  With
    ``t_scale`` the t-direction uses panels graded toward the apex, for
    integrands with structure at distance ~ t_scale * diam from it.
    """
    lo, hi, apex = (np.asarray(v, dtype=float) for v in (lo, hi, apex))
    dim = lo.size
    if t_scale is None:
        t, wt = gauss_panels([0.0, 1.0], m)
    else:
        t, wt = radial_rule(t_scale, 1.0, order=m)
    nodes, weights = [], []
    for a in range(dim):
        for plane in (lo[a], hi[a]):
            D = abs(apex[a] - plane)
            if D <= 1e-14 * max(1.0, float(np.max(hi - lo))):
                continue
            tang = [b for b in range(dim) if b != a]
            if tang:
                g1 = [gauss_panels([lo[b], hi[b]], m) for b in tang]
                mesh = np.meshgrid(*[g[0] for g in g1], indexing="ij")
                wmesh = np.ones_like(mesh[0])
                for k, g in enumerate(g1):
                    shp = [1] * len(tang)
                    shp[k] = m
                    wmesh = wmesh * g[1].reshape(shp)
                P = np.zeros((wmesh.size, dim))
                for k, b in enumerate(tang):
                    P[:, b] = mesh[k].ravel()
                wp = wmesh.ravel()
            else:
                P = np.zeros((1, dim))
                wp = np.ones(1)
            P[:, a] = plane
            x = apex[None, None, :] + t[:, None, None] * (P[None, :, :] - apex[None, None, :])
            w = (wt * t ** (dim - 1))[:, None] * D * wp[None, :]
            nodes.append(x.reshape(-1, dim))
            weights.append(w.ravel())
    return PointRule(np.concatenate(nodes), np.concatenate(weights))
