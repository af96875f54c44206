"""Classical trajectories: shooting solver, Jacobi fields, action data.

The two-point boundary value problem is solved by single shooting with a
Newton iteration on the initial velocity; the flow sensitivities needed for
the Newton step are integrated alongside the trajectory and double as the
Jacobi fields once converged.  A solved :class:`Trajectory` carries dense
interpolation of the path, the Jacobi matrices in Dirichlet parameterization
(phi0, phi1), Hamilton's principal function S, endpoint momenta, the mixed
second-derivative matrix W of -S, and (on demand) the Morse index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from spi.expr import velocity_hessian
from spi.numutil import panel_gauss

__all__ = [
    "SolveError",
    "FocalError",
    "DegenerateMeshError",
    "SolverConfig",
    "Problem",
    "Trajectory",
    "solve_bvp",
    "action",
    "s_gradients",
    "van_vleck",
    "nonfocal_check",
    "morse_index",
]


class SolveError(RuntimeError):
    pass


class FocalError(SolveError):
    """The flow Jacobian in Dirichlet data is (near) singular."""


class DegenerateMeshError(SolveError):
    """Second-variation spectrum has a near-zero eigenvalue at the finest mesh."""


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-12
    atol: float = 1e-12
    coarse_rtol: float = 1e-9
    newton_tol: float = 1e-10
    max_newton: int = 50
    focal_tol: float = 1e-8
    el_tol: float = 1e-8
    quad_nodes: int = 12
    method: str = "RK45"


@dataclass(frozen=True)
class Problem:
    lagrangian: object
    t0: float
    t1: float
    q0: np.ndarray
    q1: np.ndarray
    v0_guess: np.ndarray | None = None
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        d = self.lagrangian.dimension
        object.__setattr__(self, "q0", np.asarray(self.q0, dtype=float).reshape(d))
        object.__setattr__(self, "q1", np.asarray(self.q1, dtype=float).reshape(d))
        guess = self.v0_guess
        if guess is None:
            guess = (self.q1 - self.q0) / (self.t1 - self.t0)
        object.__setattr__(self, "v0_guess", np.asarray(guess, dtype=float).reshape(d))
        if not self.t0 < self.t1:
            raise SolveError("t0 < t1 required")

    @property
    def dimension(self):
        return self.lagrangian.dimension

    def with_endpoints(self, q0=None, q1=None, v0_guess=None):
        return replace(
            self,
            q0=self.q0 if q0 is None else q0,
            q1=self.q1 if q1 is None else q1,
            v0_guess=self.v0_guess if v0_guess is None else v0_guess,
        )


def _e_v(d, i):
    a = [0] * (2 * d + 1)
    a[1 + i] = 1
    return a


def _alpha(d, tau=0, v=(), q=()):
    a = [0] * (2 * d + 1)
    a[0] = tau
    for i in v:
        a[1 + i] += 1
    for i in q:
        a[1 + d + i] += 1
    return tuple(a)


class _Coefficients:
    """Second-variation operator coefficients extracted from one jet.

    a  = d2L/dv dv          (index [i, j])
    qv = d2L/dq dv          (index [i, j] = d2L/dq^i dv^j)
    qq = d2L/dq dq
    With the trajectory acceleration, total time derivatives of a and qv
    along the path follow by the chain rule.
    """

    def __init__(self, jet, d):
        self.d = d
        self.jet = jet
        self.a = np.empty((d, d))
        self.qv = np.empty((d, d))
        self.qq = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                self.a[i, j] = jet.partial(_alpha(d, v=(i, j)))
                self.qv[i, j] = jet.partial(_alpha(d, v=(j,), q=(i,)))
                self.qq[i, j] = jet.partial(_alpha(d, q=(i, j)))
        self.L_q = np.array([jet.partial(_alpha(d, q=(i,))) for i in range(d)])
        self.L_tv = np.array([jet.partial(_alpha(d, tau=1, v=(i,))) for i in range(d)])

    def acceleration(self, v):
        rhs = self.L_q - self.L_tv - self.qv.T @ v
        return np.linalg.solve(self.a, rhs)

    def linearization(self, v, acc):
        """P, Q with D[xi]_j = -a_ij xi''^i + P_ij xi'^i + Q_ij xi^i."""
        d, jet = self.d, self.jet
        adot = np.empty((d, d))
        qvdot = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                adot[i, j] = jet.partial(_alpha(d, tau=1, v=(i, j))) + sum(
                    jet.partial(_alpha(d, v=(i, j, k))) * acc[k]
                    + jet.partial(_alpha(d, v=(i, j), q=(k,))) * v[k]
                    for k in range(d)
                )
                qvdot[i, j] = jet.partial(_alpha(d, tau=1, v=(j,), q=(i,))) + sum(
                    jet.partial(_alpha(d, v=(j, k), q=(i,))) * acc[k]
                    + jet.partial(_alpha(d, v=(j,), q=(i, k))) * v[k]
                    for k in range(d)
                )
        P = -adot - self.qv + self.qv.T
        Q = -qvdot + self.qq
        return P, Q


def _rhs(lagrangian, d):
    n_phi = 2 * d * d

    def rhs(t, y):
        q = y[:d]
        v = y[d : 2 * d]
        jet = lagrangian.jet(t, v, q, 3, tau_order=1)
        co = _Coefficients(jet, d)
        acc = co.acceleration(v)
        phi = y[2 * d : 2 * d + n_phi].reshape(d, 2 * d)
        psi = y[2 * d + n_phi :].reshape(d, 2 * d)
        P, Q = co.linearization(v, acc)
        phidd = np.linalg.solve(co.a, P.T @ psi + Q.T @ phi)
        return np.concatenate([v, acc, psi.ravel(), phidd.ravel()])

    return rhs


class Trajectory:
    """A solved classical path with dense output and Jacobi data."""

    def __init__(self, problem, sol, v0):
        self.problem = problem
        self.sol = sol
        self.v0 = v0
        d = problem.dimension
        self.dimension = d
        yT = sol.sol(problem.t1)
        phiT = yT[2 * d : 2 * d + 2 * d * d].reshape(d, 2 * d)
        J = phiT[:, d:]
        self.flow_jacobian = J
        T = problem.t1 - problem.t0
        self.nonfocal = bool(
            abs(np.linalg.det(J)) > problem.config.focal_tol * T**d
        )
        if self.nonfocal:
            self._K1 = np.linalg.inv(J)
            self._K0 = -self._K1 @ phiT[:, :d]
        else:
            self._K1 = self._K0 = None
        self._action = None
        self._morse = None
        self._jets = {}

    # -- dense access -------------------------------------------------
    def states(self, t):
        """(q, v) with shape (d, ...) each."""
        d = self.dimension
        y = self.sol.sol(t)
        return y[:d], y[d : 2 * d]

    def position(self, t):
        return self.states(t)[0]

    def velocity(self, t):
        return self.states(t)[1]

    def jacobi(self, t):
        """phi0, phi1, dphi0, dphi1 with shape (d, d, ...) each.

        phi_a(t) = d gamma(t) / d q_a for the family of classical paths
        parameterized by its endpoints; identity/zero endpoint values.
        """
        if not self.nonfocal:
            raise FocalError("Jacobi fields in Dirichlet data need a nonfocal path")
        d = self.dimension
        y = self.sol.sol(t)
        n = 2 * d * d
        phi = y[2 * d : 2 * d + n].reshape((d, 2 * d) + np.shape(t))
        psi = y[2 * d + n :].reshape((d, 2 * d) + np.shape(t))
        phi_q, phi_v = phi[:, :d], phi[:, d:]
        psi_q, psi_v = psi[:, :d], psi[:, d:]
        k0 = self._K0.reshape((d, d) + (1,) * len(np.shape(t)))
        k1 = self._K1.reshape((d, d) + (1,) * len(np.shape(t)))
        phi0 = phi_q + np.einsum("ik...,kj...->ij...", phi_v, k0)
        phi1 = np.einsum("ik...,kj...->ij...", phi_v, k1)
        dphi0 = psi_q + np.einsum("ik...,kj...->ij...", psi_v, k0)
        dphi1 = np.einsum("ik...,kj...->ij...", psi_v, k1)
        return phi0, phi1, dphi0, dphi1

    def jet(self, t, order, tau_order=None):
        q, v = self.states(t)
        return self.problem.lagrangian.jet(t, v, q, order, tau_order)

    def velocity_hessian(self, t):
        """a(t), a(t)^-1 along the path; batch axes trail."""
        jet = self.jet(t, 2, tau_order=0)
        a, ainv, _ = velocity_hessian(jet, self.dimension)
        return a, ainv

    # -- scalar data ----------------------------------------------------
    @property
    def action(self):
        if self._action is None:
            self._action = action(self)
        return self._action

    @property
    def momenta(self):
        """(dL/dv at t0, dL/dv at t1)."""
        d = self.dimension
        out = []
        for t in (self.problem.t0, self.problem.t1):
            jet = self.jet(t, 1, tau_order=0)
            out.append(
                np.array([jet.partial(tuple(_e_v(d, i))) for i in range(d)])
            )
        return tuple(out)

    @property
    def van_vleck_matrix(self):
        return van_vleck(self)[0]

    @property
    def morse_index(self):
        if self._morse is None:
            self._morse = morse_index(self)
        return self._morse


def _shoot(problem, v0, rtol, dense):
    d = problem.dimension
    y0 = np.concatenate(
        [
            problem.q0,
            v0,
            np.hstack([np.eye(d), np.zeros((d, d))]).ravel(),
            np.hstack([np.zeros((d, d)), np.eye(d)]).ravel(),
        ]
    )
    sol = solve_ivp(
        _rhs(problem.lagrangian, d),
        (problem.t0, problem.t1),
        y0,
        method=problem.config.method,
        rtol=rtol,
        atol=problem.config.atol,
        dense_output=dense,
    )
    if not sol.success:
        raise SolveError(f"integration failed: {sol.message}")
    return sol


def solve_bvp(problem):
    """Newton-on-initial-velocity shooting; returns a Trajectory.

    The variational (Jacobi) equations are integrated alongside, so the
    Newton Jacobian and the Dirichlet Jacobi fields come from the same flow.
    """
    cfg = problem.config
    d = problem.dimension
    v0 = problem.v0_guess.copy()
    scale = 1.0 + max(np.max(np.abs(problem.q0)), np.max(np.abs(problem.q1)))
    T = problem.t1 - problem.t0
    residual = None
    for _ in range(cfg.max_newton):
        sol = _shoot(problem, v0, cfg.coarse_rtol, dense=False)
        yT = sol.y[:, -1]
        r = yT[:d] - problem.q1
        rnorm = np.max(np.abs(r))
        if rnorm <= cfg.newton_tol * scale:
            residual = rnorm
            break
        J = yT[2 * d : 2 * d + 2 * d * d].reshape(d, 2 * d)[:, d:]
        if abs(np.linalg.det(J)) < cfg.focal_tol * T**d:
            raise FocalError("flow Jacobian singular during Newton iteration")
        step = np.linalg.solve(J, r)
        alpha = 1.0
        for _ in range(8):
            trial = v0 - alpha * step
            yt = _shoot(problem, trial, cfg.coarse_rtol, dense=False).y[:, -1]
            if np.max(np.abs(yt[:d] - problem.q1)) < rnorm:
                break
            alpha *= 0.5
        v0 = v0 - alpha * step
    else:
        raise SolveError("Newton iteration on the initial velocity did not converge")

    sol = _shoot(problem, v0, cfg.rtol, dense=True)
    r = np.max(np.abs(sol.sol(problem.t1)[:d] - problem.q1))
    if r > 10 * cfg.newton_tol * scale:
        # tight integration moved the endpoint: polish once more
        yT = sol.sol(problem.t1)
        J = yT[2 * d : 2 * d + 2 * d * d].reshape(d, 2 * d)[:, d:]
        v0 = v0 - np.linalg.solve(J, yT[:d] - problem.q1)
        sol = _shoot(problem, v0, cfg.rtol, dense=True)
    traj = Trajectory(problem, sol, v0)
    _check_regularity(traj)
    return traj


def _check_regularity(traj):
    """Velocity Hessian positive-definite and EL satisfied along the grid."""
    cfg = traj.problem.config
    d = traj.dimension
    ts = traj.sol.t
    mid = 0.5 * (ts[:-1] + ts[1:])
    sample = np.unique(np.concatenate([ts, mid]))
    q, v = traj.states(sample)
    jet = traj.problem.lagrangian.jet(sample, v, q, 2, tau_order=0)
    _, _, posdef = velocity_hessian(jet, d)
    if not posdef:
        raise SolveError("velocity Hessian not positive-definite along the path")
    res = euler_lagrange_residual(traj, sample)
    scale = 1.0 + np.max(np.abs(res[1]))
    if np.max(np.abs(res[0])) > cfg.el_tol * scale:
        raise SolveError("Euler-Lagrange residual above tolerance")


def euler_lagrange_residual(traj, ts, h=1e-6):
    """(residual, dL/dq samples): dL/dq - d/dt[dL/dv] on the dense output.

    The time derivative is a Richardson-extrapolated central difference of
    the momentum evaluated on the interpolated path, so this genuinely tests
    the interpolant, not the ODE right-hand side.
    """
    d = traj.dimension
    ts = np.asarray(ts)
    h = h * max(1.0, traj.problem.t1 - traj.problem.t0)
    lo, hi = traj.problem.t0, traj.problem.t1
    ts_in = np.clip(ts, lo + 2 * h, hi - 2 * h)

    def momentum(t):
        q, v = traj.states(t)
        jet = traj.problem.lagrangian.jet(t, v, q, 1, tau_order=0)
        return np.array([jet.partial(_e_v(d, i)) for i in range(d)])

    def dpdt(step):
        return (momentum(ts_in + step) - momentum(ts_in - step)) / (2 * step)

    dp = (4.0 * dpdt(h / 2) - dpdt(h)) / 3.0
    q, v = traj.states(ts_in)
    jet = traj.problem.lagrangian.jet(ts_in, v, q, 1, tau_order=0)
    L_q = np.array(
        [jet.partial(_alpha(d, q=(i,))) for i in range(d)]
    )
    return L_q - dp, L_q


def action(traj):
    """S = integral of L along the path (composite Gauss on solver panels)."""
    nodes, weights = panel_gauss(traj.sol.t, traj.problem.config.quad_nodes)
    q, v = traj.states(nodes)
    vals = traj.problem.lagrangian.value(nodes, v, q)
    return float(np.dot(weights, vals))


def s_gradients(traj):
    """(dS/dq0, dS/dq1) from the endpoint momenta."""
    p0, p1 = traj.momenta
    return -p0, p1


def van_vleck(traj):
    """W = d2(-S)/dq0 dq1 and |det W|, from the Jacobi-field relation."""
    if not traj.nonfocal:
        raise FocalError("van Vleck matrix undefined for a focal trajectory")
    d = traj.dimension
    t0, t1 = traj.problem.t0, traj.problem.t1
    a0, _ = traj.velocity_hessian(t0)
    _, _, dphi0, dphi1 = traj.jacobi(np.array([t0, t1]))
    W = a0 @ dphi1[..., 0]
    a1, _ = traj.velocity_hessian(t1)
    W_alt = -(a1 @ dphi0[..., 1]).T
    if not np.allclose(W, W_alt, rtol=1e-6, atol=1e-8 * (1 + np.abs(W).max())):
        raise SolveError("van Vleck cross-check failed (endpoint formulas disagree)")
    return W, float(abs(np.linalg.det(W)))


def nonfocal_check(traj):
    """True iff the endpoint map is a local diffeomorphism in Dirichlet data."""
    return traj.nonfocal


def second_variation_matrix(traj, n):
    """Galerkin matrix of the action's second variation on hat functions.

    Mesh of n uniform elements; basis e_i * hat_j over interior nodes.
    """
    d = traj.dimension
    t0, t1 = traj.problem.t0, traj.problem.t1
    mesh = np.linspace(t0, t1, n + 1)
    nodes, weights = panel_gauss(mesh, 4)
    q, v = traj.states(nodes)
    jet = traj.problem.lagrangian.jet(nodes, v, q, 2, tau_order=0)
    P = nodes.size
    avv = np.empty((d, d, P))
    aqv = np.empty((d, d, P))
    aqq = np.empty((d, d, P))
    for i in range(d):
        for j in range(d):
            avv[i, j] = jet.partial(_alpha(d, v=(i, j)))
            aqv[i, j] = jet.partial(_alpha(d, v=(j,), q=(i,)))
            aqq[i, j] = jet.partial(_alpha(d, q=(i, j)))
    h = (t1 - t0) / n
    nint = n - 1
    B = np.zeros((nint * d, nint * d))
    # hat_j supported on elements j-1, j (0-based interior node j-1 at mesh[j])
    for el in range(n):
        sl = slice(el * 4, el * 4 + 4)
        x = (nodes[sl] - mesh[el]) / h
        w = weights[sl]
        # local basis: node at left end (interior index el-1), right end (el)
        for loc_a, na in ((0, el - 1), (1, el)):
            if not 0 <= na < nint:
                continue
            ha = x if loc_a else 1.0 - x
            dha = (1.0 if loc_a else -1.0) / h
            for loc_b, nb in ((0, el - 1), (1, el)):
                if not 0 <= nb < nint:
                    continue
                hb = x if loc_b else 1.0 - x
                dhb = (1.0 if loc_b else -1.0) / h
                blk = (
                    np.einsum("ijp,p->ij", avv[:, :, sl], w * dha * dhb)
                    + np.einsum("ijp,p->ij", aqv[:, :, sl], w * ha * dhb)
                    + np.einsum("jip,p->ij", aqv[:, :, sl], w * dha * hb)
                    + np.einsum("ijp,p->ij", aqq[:, :, sl], w * ha * hb)
                )
                B[na * d : na * d + d, nb * d : nb * d + d] += blk
    return 0.5 * (B + B.T)


def morse_index(traj, start=8, max_doublings=6, zero_tol=1e-10):
    """Negative-eigenvalue count of the discretized second variation.

    The mesh is refined until the count is stable across two successive
    doublings; a near-zero eigenvalue at the finest mesh raises, pointing
    the caller at the nonfocal check.
    """
    counts = []
    n = start
    w = None
    for _ in range(max_doublings + 1):
        B = second_variation_matrix(traj, n)
        w = np.linalg.eigvalsh(B)
        norm = max(np.max(np.abs(w)), 1e-300)
        counts.append(int(np.sum(w < -zero_tol * norm)))
        if len(counts) >= 3 and counts[-1] == counts[-2] == counts[-3]:
            return counts[-1]
        n *= 2
    norm = max(np.max(np.abs(w)), 1e-300)
    if np.min(np.abs(w)) < 1e-6 * norm:
        raise DegenerateMeshError(
            "near-zero second-variation eigenvalue; check nonfocality"
        )
    raise SolveError("Morse index did not stabilize under mesh refinement")
