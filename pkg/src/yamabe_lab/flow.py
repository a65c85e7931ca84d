"""Normalized Yamabe flow with minimal boundary, u_t = -((n-2)/4)(R - Rbar) u,
d u/d eta = 0, integrated semi-implicitly in the w = u^{(n+2)/(n-2)} form."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .conformal import (ConformalOperator, PositivityError, _cg, assemble_system,
                        quadratic_form)
from .geometry import ARTIFICIAL, Chart, Field, Grid


class StepRejected(RuntimeError):
    def __init__(self, msg, node=None):
        super().__init__(msg)
        self.node = node


@dataclass
class FlowState:
    u: np.ndarray
    t: float
    rbar: float = np.nan
    volume: float = np.nan
    minR: float = np.nan
    maxR: float = np.nan
    minU: float = np.nan
    maxU: float = np.nan
    R: np.ndarray | None = field(default=None, repr=False)
    dev2: float = np.nan  # int (R - Rbar)^2 dv


class YamabeFlow:
    """Discrete flow on a uniform grid; L_h carries the homogeneous boundary condition."""

    def __init__(self, chart: Chart, grid: Grid, rbar_tol: float = 1e-8, abs_floor: float = 1e-14,
                 solver_tol: float = 1e-13):
        self.chart, self.grid = chart, grid
        self.n = chart.n
        self.op = ConformalOperator(chart, grid, "energy")
        self.sys = assemble_system(self.op)
        self.p = (self.n + 2) / (self.n - 2)
        self.q = 2 * self.n / (self.n - 2)
        self.rbar_tol = rbar_tol
        self.abs_floor = abs_floor
        self.solver_tol = solver_tol
        s = self.sys
        self.fr = np.flatnonzero(s.free)
        self.ar = np.flatnonzero(~s.free)
        self.A_ff = s.A[self.fr][:, self.fr].tocsr()
        self.A_fa = s.A[self.fr][:, self.ar].tocsr()

    # ---------------------------------------------------------------- basics
    def volume(self, u) -> float:
        return float(np.dot(self.sys.W, np.ravel(u) ** self.q))

    def normalize(self, u) -> np.ndarray:
        return np.asarray(u) * self.volume(u) ** (-(self.n - 2) / (2 * self.n))

    def curvature(self, u) -> np.ndarray:
        f = np.ravel(u)
        return (-(self.sys.A @ f) / self.sys.W * f ** (-self.p)).reshape(self.grid.shape)

    def rbar(self, u) -> float:
        return quadratic_form(self.op, u) / self.volume(u)

    def state(self, u, t) -> FlowState:
        R = self.curvature(u)
        rb = self.rbar(u)
        vol = self.volume(u)
        f = np.ravel(u)
        dev2 = float(np.dot(self.sys.W * f ** self.q, (R.ravel() - rb) ** 2))
        return FlowState(np.asarray(u).reshape(self.grid.shape), float(t), rb, vol,
                         float(R.min()), float(R.max()), float(f.min()), float(f.max()), R, dev2)

    # ------------------------------------------------------------------ step
    def step(self, state: FlowState, dt: float) -> FlowState:
        if dt <= 0:
            raise ValueError("dt must be positive")
        u = np.ravel(state.u)
        if np.any(u <= 0):
            raise PositivityError("u must be positive")
        W = self.sys.W
        fr, ar = self.fr, self.ar
        a = (self.n + 2) / 4.0
        D = self.p * u ** (self.p - 1)
        Wf = W[fr]
        M = (sp.diags(Wf * D[fr] / dt) - a * self.A_ff).tocsr()
        rhs = Wf * D[fr] * u[fr] / dt + a * state.rbar * Wf * u[fr] ** self.p
        if len(ar):
            rhs = rhs + a * (self.A_fa @ u[ar])
        ustar = _cg(M, rhs, x0=u[fr], tol=self.solver_tol)
        w = u[fr] ** self.p + D[fr] * (ustar - u[fr])
        if np.any(w <= 0):
            bad = int(fr[np.argmin(w)])
            raise StepRejected("positivity lost", node=np.unravel_index(bad, self.grid.shape))
        unew = u.copy()
        unew[fr] = w ** (1.0 / self.p)
        unew = self.normalize(unew)
        return self.state(unew, state.t + dt)

    # ------------------------------------------------------------------- run
    def run(self, u0, T: float, dt0: float, dt_min: float = 1e-9, dt_max: float | None = None,
            grow_after: int = 5, adapt: bool = True, max_steps: int = 100000,
            keep_every: int = 1):
        """Adaptive stepping to time T; returns (states, report).

        With ``keep_every`` > 1 only every k-th state (and the last) keeps its
        u and R arrays; the others retain the scalar monitors."""
        u0 = np.asarray(u0.values if isinstance(u0, Field) else u0, dtype=float)
        if np.any(u0 <= 0):
            raise PositivityError("u0 must be positive")
        st = self.state(self.normalize(u0), 0.0)
        states = [st]
        dt = dt0
        dt_max = dt_max or max(dt0, T / 20)
        accepts = 0
        rejects = 0
        status = "ok"
        while T - st.t > 1e-9 * dt and len(states) < max_steps:
            # absorb accumulated rounding of t into the last step
            h = dt if T - st.t > dt * (1 + 1e-6) else T - st.t
            try:
                new = self.step(st, h)
                tol = self.rbar_tol * abs(st.rbar) + self.abs_floor
                if adapt and new.rbar > st.rbar + tol:
                    raise StepRejected("Rbar increased")
            except StepRejected:
                if not adapt:
                    raise
                rejects += 1
                dt = h / 2
                accepts = 0
                if dt < dt_min:
                    status = "dt_underflow"
                    break
                continue
            if keep_every > 1 and (len(states) - 1) % keep_every:
                states[-1] = replace(states[-1], u=None, R=None)
            st = new
            states.append(st)
            accepts += 1
            if adapt and accepts >= grow_after:
                dt = min(dt * 1.2, dt_max)
                accepts = 0
        return states, dict(status=status, rejects=rejects, steps=len(states) - 1,
                            rbar_inf=rbar_infinity(states))

    # -------------------------------------------------------------- monitors
    def lp_deviation(self, state: FlowState, p: float, rbar_ref: float) -> float:
        if not (1 < p < self.n / 2 + 1):
            raise ValueError(f"p must lie in (1, {self.n / 2 + 1})")
        f = np.ravel(state.u)
        R = state.R if state.R is not None else self.curvature(state.u)
        return float(np.dot(self.sys.W * f ** self.q, np.abs(R.ravel() - rbar_ref) ** p))

    def neumann_R(self, state: FlowState) -> float:
        """max |dR/d eta| over physical faces, excluding artificial-edge nodes."""
        R = state.R if state.R is not None else self.curvature(state.u)
        if not self.chart.has_boundary:
            return 0.0
        dn = self.op.normal_derivative(R)
        kind = self.grid.classify()
        best = 0.0
        for face, v in dn.faces.items():
            ok = kind[self.grid.face_slice(*face)] != ARTIFICIAL
            if np.any(ok):
                best = max(best, float(np.max(np.abs(v[ok]))))
        return best


def rbar_infinity(states, frac: float = 0.1) -> float:
    """Trailing average of Rbar over the last `frac` of the steps."""
    k = max(1, int(np.ceil(frac * len(states))))
    return float(np.mean([s.rbar for s in states[-k:]]))


def rbar_identity(states, n: int, rel_floor: float = 1e-12):
    """Per-step relative error of dRbar/dt against -((n-2)/2) int (R-Rbar)^2 dv.

    Returns arrays (t_k, lhs_k, rhs_k, relerr_k) at interior snapshots.  Once
    |rhs| drops below rel_floor * max|rhs| the discrete state sits at its
    round-off fixed point; those steps carry relerr = nan.
    """
    if len(states) < 3:
        return (np.zeros(0),) * 4
    t = np.array([s.t for s in states])
    rb = np.array([s.rbar for s in states])
    dev = np.array([s.dev2 for s in states])
    lhs = (rb[2:] - rb[:-2]) / (t[2:] - t[:-2])
    rhs = -(n - 2) / 2 * dev[1:-1]
    resolved = np.abs(rhs) > rel_floor * np.max(np.abs(rhs))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(resolved, np.abs(lhs - rhs) / np.abs(rhs), np.nan)
    return t[1:-1], lhs, rhs, rel


def max_principle_ok(states, tol=1e-6) -> tuple[bool, float]:
    """min R(t) >= min(min R(0), 0) - tol for every state; returns (ok, worst margin)."""
    floor = min(states[0].minR, 0.0)
    margin = min(s.minR - floor for s in states)
    return margin >= -tol, float(margin)


def snapshot_table(flow: YamabeFlow, states, p: float | None = None, rbar_ref: float | None = None):
    """Rows for the snapshot CSV."""
    n = flow.n
    p = p or 0.5 * (1 + (n / 2 + 1))
    rbar_ref = rbar_infinity(states) if rbar_ref is None else rbar_ref
    _, _, _, rel = rbar_identity(states, n)
    rel_full = np.concatenate([[np.nan], rel, [np.nan]]) if len(states) >= 3 else [np.nan] * len(states)
    rows = []
    for k, s in enumerate(states):
        if s.u is None:
            continue
        rows.append(dict(t=s.t, rbar=s.rbar, volume=s.volume, minR=s.minR, maxR=s.maxR,
                         minU=s.minU, maxU=s.maxU, lp_dev=flow.lp_deviation(s, p, rbar_ref),
                         neumannR=flow.neumann_R(s), rbar_identity_err=float(rel_full[k])))
    return rows
