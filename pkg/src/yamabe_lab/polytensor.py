"""Polynomial 2-tensors on the half-space: coefficient spaces, exact
differentiation, the algebraic Schouten/Weyl pair (A, Z) and the rank
computation behind the vanishing lemma for Z(H) = 0."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np


def degree_bound(n: int) -> int:
    return (n - 2) // 2


@lru_cache(maxsize=None)
def monomials(n: int, deg: int) -> tuple:
    """All exponent tuples in n variables with total degree <= deg, graded."""
    out = []
    for k in range(deg + 1):
        for combo in combinations_with_replacement(range(n), k):
            a = [0] * n
            for i in combo:
                a[i] += 1
            out.append(tuple(a))
    return tuple(out)


class PolySpace:
    """Coefficient vectors over `monomials(n, deg)` with exact derivative maps."""

    def __init__(self, n: int, deg: int):
        self.n, self.deg = n, deg
        self.mono = monomials(n, deg)
        self.index = {a: i for i, a in enumerate(self.mono)}
        self.M = len(self.mono)
        self.D = []
        for k in range(n):
            Dk = np.zeros((self.M, self.M))
            for j, a in enumerate(self.mono):
                if a[k] > 0:
                    b = list(a)
                    b[k] -= 1
                    Dk[self.index[tuple(b)], j] = a[k]
            self.D.append(Dk)

    def eval_matrix(self, X) -> np.ndarray:
        """(P, M) matrix of monomial values at points X (P, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        E = np.array(self.mono, dtype=int)
        return np.prod(X[:, None, :] ** E[None, :, :], axis=-1)

    def deriv(self, coef, k: int):
        """d/dx_k applied along the last axis of `coef`."""
        return coef @ self.D[k].T

    def total_degree(self) -> np.ndarray:
        return np.array([sum(a) for a in self.mono])


@lru_cache(maxsize=None)
def poly_space(n: int, deg: int) -> PolySpace:
    return PolySpace(n, deg)


@dataclass
class PolyTensor:
    """H_ab(x) = sum_alpha h_{ab,alpha} x^alpha stored as coef[a, b, m] over PolySpace(n, d)."""
    n: int
    d: int
    coef: np.ndarray

    @property
    def space(self) -> PolySpace:
        return poly_space(self.n, self.d)

    @classmethod
    def zeros(cls, n: int, d: int | None = None) -> "PolyTensor":
        d = degree_bound(n) if d is None else d
        return cls(n, d, np.zeros((n, n, poly_space(n, d).M)))

    def __call__(self, X) -> np.ndarray:
        E = self.space.eval_matrix(X)
        return np.einsum("abm,pm->pab", self.coef, E)

    def derivative(self, k: int) -> np.ndarray:
        return self.space.deriv(self.coef, k)

    def scaled(self, s: float) -> "PolyTensor":
        """Coefficients of x -> H(x / s)."""
        deg = self.space.total_degree()
        return PolyTensor(self.n, self.d, self.coef * s ** (-deg.astype(float)))

    def coefficient_norm2(self, tangential_only: bool = True) -> np.ndarray:
        """sum_{ij} |h_{ij,alpha}|^2 per monomial."""
        m = self.n - 1 if tangential_only else self.n
        return np.sum(self.coef[:m, :m] ** 2, axis=(0, 1))

    def violations(self) -> dict:
        """Residuals of the admissibility constraints (all zero when admissible)."""
        n, sp_ = self.n, self.space
        c = self.coef
        deg = sp_.total_degree()
        out = {}
        out["symmetric"] = float(np.max(np.abs(c - c.transpose(1, 0, 2)), initial=0.0))
        out["trace"] = float(np.max(np.abs(np.einsum("aam->m", c)), initial=0.0))
        out["normal_rows"] = float(np.max(np.abs(c[:, n - 1, :]), initial=0.0))
        out["constant"] = float(np.max(np.abs(c[:, :, deg == 0]), initial=0.0))
        en = tuple([0] * (n - 1) + [1])
        bad1 = [i for i, a in enumerate(sp_.mono) if sum(a) == 1 and a != en]
        out["linear_tangential"] = float(np.max(np.abs(c[:, :, bad1]), initial=0.0))
        out["radial"] = float(np.max(np.abs(radiality_matrix(n, self.d) @ _flat_tangential(c, n)), initial=0.0))
        return out

    def is_admissible(self, tol: float = 1e-12) -> bool:
        return all(v <= tol for v in self.violations().values())


# ---------------------------------------------------------------------------
# Schouten / Weyl

def _second(coef, sp_: PolySpace):
    """dd[..., c, e, m] = d_c d_e of coef[..., m]."""
    n = sp_.n
    first = np.stack([sp_.deriv(coef, k) for k in range(n)], axis=-2)
    return np.stack([np.stack([sp_.deriv(first[..., e, :], c) for e in range(n)], axis=-2)
                     for c in range(n)], axis=-3)


def schouten_weyl(H: PolyTensor):
    """Return (A[a,c,m], Z[a,b,c,d,m]) as coefficient arrays on H's PolySpace.

    A_ac = d_c d_e H_ae + d_a d_e H_ce - d_e d_e H_ac - (1/(n-1)) d_e d_f H_ef delta_ac
    Z_abcd = d_b d_d H_ac - d_b d_c H_ad + d_a d_c H_db - d_a d_d H_bc
             + (A_ac delta_bd - A_ad delta_bc + A_bd delta_ac - A_bc delta_ad)/(n-2)
    """
    n = H.n
    sp_ = H.space
    dd = _second(H.coef, sp_)  # [a, b, c, e, m] = d_c d_e H_ab
    I = np.eye(n)
    t1 = np.einsum("aecem->acm", dd)      # d_c d_e H_ae
    t2 = np.einsum("ceaem->acm", dd)      # d_a d_e H_ce
    lap = np.einsum("aceem->acm", dd)     # d_e d_e H_ac
    ddh = np.einsum("efefm->m", dd)       # d_e d_f H_ef
    A = t1 + t2 - lap - ddh[None, None, :] * I[:, :, None] / (n - 1)
    # dd[a, b, c, e] = d_c d_e H_ab
    Z = (np.einsum("acbdm->abcdm", dd)    # d_b d_d H_ac
         - np.einsum("adbcm->abcdm", dd)  # d_b d_c H_ad
         + np.einsum("dbacm->abcdm", dd)  # d_a d_c H_db
         - np.einsum("bcadm->abcdm", dd))  # d_a d_d H_bc
    Z = Z + (np.einsum("acm,bd->abcdm", A, I) - np.einsum("adm,bc->abcdm", A, I)
             + np.einsum("bdm,ac->abcdm", A, I) - np.einsum("bcm,ad->abcdm", A, I)) / (n - 2)
    return A, Z


# ---------------------------------------------------------------------------
# coefficient space of tangential components and constraint matrices

def _pairs(n):
    return [(i, j) for i in range(n - 1) for j in range(i, n - 1)]


def _flat_tangential(coef, n):
    """Vector of (h_ij,alpha) for i <= j < n-1 over all monomials."""
    return np.concatenate([coef[i, j] for i, j in _pairs(n)])


def _allowed_monomials(n, d):
    sp_ = poly_space(n, d)
    en = tuple([0] * (n - 1) + [1])
    return [m for m, a in enumerate(sp_.mono) if 1 <= sum(a) <= d and (sum(a) > 1 or a == en)]


def radiality_matrix(n: int, d: int) -> np.ndarray:
    """Rows encode sum_j x_j H_ij(xbar, 0) = 0 on the full (pairs x monomials) vector."""
    sp_ = poly_space(n, d)
    big = poly_space(n, d + 1)
    pairs = _pairs(n)
    M = sp_.M
    pidx = {p: k for k, p in enumerate(pairs)}
    rows = {}
    for i in range(n - 1):
        for j in range(n - 1):
            key = (min(i, j), max(i, j))
            for m, a in enumerate(sp_.mono):
                if a[n - 1] != 0:
                    continue  # vanishes on x_n = 0
                b = list(a)
                b[j] += 1
                r = (i, big.index[tuple(b)])
                rows.setdefault(r, np.zeros(len(pairs) * M))
                rows[r][pidx[key] * M + m] += 1.0
    return np.array(list(rows.values())) if rows else np.zeros((0, len(pairs) * M))


def _expand(n, d, keep):
    """Matrix mapping reduced unknowns (pairs x allowed monomials) to PolyTensor coef."""
    sp_ = poly_space(n, d)
    pairs = _pairs(n)
    P = np.zeros((n * n * sp_.M, len(pairs) * len(keep)))
    for k, (i, j) in enumerate(pairs):
        for l, m in enumerate(keep):
            col = k * len(keep) + l
            P[(i * n + j) * sp_.M + m, col] = 1.0
            P[(j * n + i) * sp_.M + m, col] = 1.0
    return P


def constraint_system(n: int, d: int | None = None, weyl: bool = True, normal: bool = True):
    """(C, P): admissible coefficients with the requested extra constraints are
    the null space of C, mapped to flattened PolyTensor coef by P."""
    d = degree_bound(n) if d is None else d
    sp_ = poly_space(n, d)
    keep = _allowed_monomials(n, d)
    P = _expand(n, d, keep)
    pairs = _pairs(n)
    nred = P.shape[1]
    rows = []
    # trace free per monomial
    for l in range(len(keep)):
        r = np.zeros(nred)
        for k, (i, j) in enumerate(pairs):
            if i == j:
                r[k * len(keep) + l] = 1.0
        rows.append(r)
    # tangential radiality on x_n = 0
    R = radiality_matrix(n, d)
    sel = np.concatenate([[k * sp_.M + m for m in keep] for k in range(len(pairs))])
    if R.size:
        rows.extend(R[:, sel])
    if normal:
        # d_n H_ij = 0 on x_n = 0: coefficients with alpha_n == 1 vanish
        for k in range(len(pairs)):
            for l, m in enumerate(keep):
                if sp_.mono[m][n - 1] == 1:
                    r = np.zeros(nred)
                    r[k * len(keep) + l] = 1.0
                    rows.append(r)
    if weyl:
        cols = []
        for c in range(nred):
            H = PolyTensor(n, d, P[:, c].reshape(n, n, sp_.M))
            cols.append(schouten_weyl(H)[1].ravel())
        Zm = np.array(cols).T
        rows.extend(Zm[np.any(Zm != 0, axis=1)])
    C = np.array(rows) if rows else np.zeros((0, nred))
    return C, P


def null_space(C: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of ker C using the threshold rtol * sigma_max."""
    if C.shape[0] == 0:
        return np.eye(C.shape[1])
    _, s, Vt = np.linalg.svd(C, full_matrices=C.shape[0] < C.shape[1])
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > rtol * smax)) if smax > 0 else 0
    return Vt[rank:].T


def lemma1_kernel(n: int, d: int | None = None, drop_normal: bool = False) -> int:
    """dim{admissible H : Z(H) = 0, d_n H_ij = 0 on x_n = 0}; `drop_normal`
    removes the boundary condition."""
    if n < 4:
        raise ValueError("n >= 4 required")
    C, _ = constraint_system(n, d, weyl=True, normal=not drop_normal)
    return int(null_space(C).shape[1])


def admissible_basis(n: int, d: int | None = None):
    """Basis of admissible PolyTensors (no Weyl or normal-derivative constraint)."""
    d = degree_bound(n) if d is None else d
    C, P = constraint_system(n, d, weyl=False, normal=False)
    N = null_space(C)
    M = poly_space(n, d).M
    return [PolyTensor(n, d, (P @ N[:, k]).reshape(n, n, M)) for k in range(N.shape[1])]


def random_admissible(n: int, rng, d: int | None = None, scale: float = 1.0) -> PolyTensor:
    basis = admissible_basis(n, d)
    d = degree_bound(n) if d is None else d
    if not basis:
        return PolyTensor.zeros(n, d)
    w = rng.normal(size=len(basis)) * scale
    return PolyTensor(n, d, sum(wk * b.coef for wk, b in zip(w, basis)))
