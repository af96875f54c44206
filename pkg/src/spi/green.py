"""Green's function of the second-variation operator along a trajectory.

Two constructions are kept: variation of parameters through the fundamental
2d x 2d solution matrix, and the closed form through the Jacobi fields and
the inverse mixed Hessian of -S.  They are cross-validated at build time.
Evaluation returns the smooth part of the requested derivative plus, for the
mixed second derivative, the coefficient of the delta distribution on the
diagonal, which is the inverse velocity Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from spi.classical import FocalError, _Coefficients, van_vleck

__all__ = ["GreenValue", "GreenRep", "build_green", "operator_residual", "GreenBuildError"]


class GreenBuildError(RuntimeError):
    pass


class GreenValue(NamedTuple):
    smooth: np.ndarray  # (d, d) or (d, d, P)
    delta_coeff: np.ndarray | None  # a^-1 at the second argument, same shape


@dataclass
class GreenRep:
    """Structured G(s, t) with first-index leg at time s, second at time t."""

    traj: object
    W: np.ndarray
    Minv: np.ndarray  # inverse of W = d2(-S)/dq0 dq1
    mode: str = "vanvleck"
    check_residual: float = 0.0

    @property
    def dimension(self):
        return self.traj.dimension

    def a_inv(self, t):
        """Inverse velocity Hessian along the path; batch axes trail."""
        return self.traj.velocity_hessian(t)[1]

    def evaluate(self, s, t, ds=0, dt=0, mode=None):
        """Derivative d_s^ds d_t^dt G(s, t) as (smooth, delta_coeff).

        On the diagonal the two one-sided smooth branches are averaged
        (Theta(0) = 1/2).  delta_coeff is present exactly for ds = dt = 1.
        """
        mode = mode or self.mode
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        lo, hi = self.traj.problem.t0, self.traj.problem.t1
        eps = 1e-12 * (hi - lo)
        if np.any(s < lo - eps) or np.any(s > hi + eps) or np.any(t < lo - eps) or np.any(t > hi + eps):
            raise ValueError("evaluation time outside the trajectory domain")
        if ds not in (0, 1) or dt not in (0, 1):
            raise ValueError("ds, dt must be 0 or 1")
        if mode == "vanvleck":
            plus, minus = self._branches_vanvleck(s, t, ds, dt)
        elif mode == "vop":
            if ds:
                raise ValueError("first-argument derivatives need mode='vanvleck'")
            plus, minus = self._branches_vop(s, t, dt)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        batch = np.broadcast_shapes(s.shape, t.shape)
        sb = np.broadcast_to(s, batch)
        tb = np.broadcast_to(t, batch)
        sel_plus = (sb < tb).astype(float)
        sel_minus = (sb > tb).astype(float)
        sel_diag = 1.0 - sel_plus - sel_minus
        smooth = plus * (sel_plus + 0.5 * sel_diag) + minus * (sel_minus + 0.5 * sel_diag)
        delta = self.a_inv(tb) if (ds and dt) else None
        return GreenValue(smooth, delta)

    def _branches_vanvleck(self, s, t, ds, dt):
        phi0_s, phi1_s, dphi0_s, dphi1_s = self.traj.jacobi(s)
        phi0_t, phi1_t, dphi0_t, dphi1_t = self.traj.jacobi(t)
        fs_plus = dphi1_s if ds else phi1_s
        fs_minus = dphi0_s if ds else phi0_s
        ft_plus = dphi0_t if dt else phi0_t
        ft_minus = dphi1_t if dt else phi1_t
        plus = np.einsum("ik...,kl,jl...->ij...", fs_plus, self.Minv, ft_plus)
        minus = np.einsum("ik...,kl,jl...->ij...", fs_minus, self.Minv.T, ft_minus)
        return plus, minus

    def _branches_vop(self, s, t, dt):
        # psi blocks contract against a^-1 through their lower (column) index
        psi0, psi1 = self._psi(s)
        ainv_s = self.a_inv(s)
        e0 = -np.einsum("ik...,lk...->il...", ainv_s, psi0)
        e1 = np.einsum("ik...,lk...->il...", ainv_s, psi1)
        phi0_t, phi1_t, dphi0_t, dphi1_t = self.traj.jacobi(t)
        ft_plus = dphi0_t if dt else phi0_t
        ft_minus = dphi1_t if dt else phi1_t
        plus = np.einsum("il...,jl...->ij...", e0, ft_plus)
        minus = np.einsum("il...,jl...->ij...", e1, ft_minus)
        return plus, minus

    def _psi(self, t):
        """Right d x 2d half of the inverse fundamental matrix, at times t."""
        d = self.dimension
        phi0, phi1, dphi0, dphi1 = self.traj.jacobi(t)
        batch = phi0.shape[2:]
        M = np.empty((2 * d, 2 * d) + batch)
        M[:d, :d] = phi0
        M[:d, d:] = phi1
        M[d:, :d] = dphi0
        M[d:, d:] = dphi1
        Mm = np.moveaxis(M, (0, 1), (-2, -1))
        try:
            Mi = np.linalg.inv(Mm)
        except np.linalg.LinAlgError as err:
            raise GreenBuildError(
                "fundamental-matrix inversion failed; inconsistent with its "
                "constant-sign Wronskian"
            ) from err
        Mi = np.moveaxis(Mi, (-2, -1), (0, 1))
        return Mi[:d, d:], Mi[d:, d:]


def build_green(traj, grid=50, tol=1e-8):
    """Construct G both ways and cross-validate on a grid.

    Returns a :class:`GreenRep` evaluating through the closed form; the
    variation-of-parameters route stays available via mode='vop'.
    """
    if not traj.nonfocal:
        raise FocalError("Green's function requires a nonfocal trajectory")
    W, _ = van_vleck(traj)
    rep = GreenRep(traj, W, np.linalg.inv(W))
    t0, t1 = traj.problem.t0, traj.problem.t1
    ts = np.linspace(t0, t1, grid)
    S, T = np.meshgrid(ts, ts, indexing="ij")
    g_vv = rep.evaluate(S.ravel(), T.ravel(), mode="vanvleck").smooth
    g_vp = rep.evaluate(S.ravel(), T.ravel(), mode="vop").smooth
    resid = float(np.max(np.abs(g_vv - g_vp)))
    scale = 1.0 + float(np.max(np.abs(g_vv)))
    if resid > tol * scale:
        raise GreenBuildError(
            f"Green's function constructions disagree: {resid:.3e}"
        )
    rep.check_residual = resid
    return rep


def propagator_block(rep, s, t, jac_s=None, jac_t=None):
    """Smooth parts of all four leg-type derivatives as one (P, 2d, 2d) block.

    Leg-type index order: the first d slots are time-differentiated ("v")
    legs, the last d are plain ("q") legs; axis -2 belongs to the argument
    s, axis -1 to t.  Precomputed Jacobi data for s and t may be passed to
    avoid re-evaluating the dense output.
    """
    d = rep.dimension
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    phi0_s, phi1_s, dphi0_s, dphi1_s = jac_s if jac_s is not None else rep.traj.jacobi(s)
    phi0_t, phi1_t, dphi0_t, dphi1_t = jac_t if jac_t is not None else rep.traj.jacobi(t)
    sel_plus = (s < t).astype(float)
    sel_minus = (s > t).astype(float)
    diag = 1.0 - sel_plus - sel_minus
    wp = sel_plus + 0.5 * diag
    wm = sel_minus + 0.5 * diag
    P = s.size
    out = np.empty((P, 2 * d, 2 * d))
    for ds, fs_p, fs_m in ((1, dphi1_s, dphi0_s), (0, phi1_s, phi0_s)):
        for dt, ft_p, ft_m in ((1, dphi0_t, dphi1_t), (0, phi0_t, phi1_t)):
            plus = np.einsum("ikp,kl,jlp->pij", fs_p, rep.Minv, ft_p)
            minus = np.einsum("ikp,kl,jlp->pij", fs_m, rep.Minv.T, ft_m)
            ru = slice(0, d) if ds else slice(d, 2 * d)
            rw = slice(0, d) if dt else slice(d, 2 * d)
            out[:, ru, rw] = plus * wp[:, None, None] + minus * wm[:, None, None]
    return out


def operator_residual(rep, s, t, h=1e-5):
    """Apply the second-variation operator in t to G(s, -) off the diagonal.

    Second t-derivatives of the smooth part come from finite differences of
    the first derivative; operator coefficients from jets along the path.
    Should vanish (one d x d matrix per point) away from s = t.
    """
    traj = rep.traj
    d = traj.dimension
    t0, t1 = traj.problem.t0, traj.problem.t1
    h = h * (t1 - t0)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(s - t) <= 4 * h):
        raise ValueError("points too close to the diagonal for the FD stencil")
    if np.any(t - 2 * h < t0) or np.any(t + 2 * h > t1):
        raise ValueError("second argument too close to the boundary for the FD stencil")

    def g(dt, tt):
        return rep.evaluate(s, tt, 0, dt).smooth

    G = g(0, t)
    dG = g(1, t)
    d2_1 = (g(1, t + h) - g(1, t - h)) / (2 * h)
    d2_2 = (g(1, t + h / 2) - g(1, t - h / 2)) / h
    d2G = (4.0 * d2_2 - d2_1) / 3.0

    q, v = traj.states(t)
    jet = traj.problem.lagrangian.jet(t, v, q, 3, tau_order=1)
    batch = np.shape(t)
    if batch:
        raise ValueError("operator_residual expects scalar times")
    co = _Coefficients(jet, d)
    acc = co.acceleration(v)
    P, Q = co.linearization(v, acc)
    # D[xi]_j = -a_ij xi''^i + P_ij xi'^i + Q_ij xi^i applied to the second leg
    return (
        -np.einsum("ij,ki->kj", co.a, d2G)
        + np.einsum("ij,ki->kj", P, dG)
        + np.einsum("ij,ki->kj", Q, G)
    )
