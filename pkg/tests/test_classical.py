"""BVP solver, Jacobi fields, action data against closed forms and FD."""

import numpy as np
import pytest

from spi.classical import (
    DegenerateMeshError,
    FocalError,
    Problem,
    SolveError,
    SolverConfig,
    action,
    euler_lagrange_residual,
    morse_index,
    nonfocal_check,
    s_gradients,
    solve_bvp,
    van_vleck,
)
from spi.expr import ExprLagrangian

FREE = ExprLagrangian.parse("v^2/2", 1)
EXPCOORD = ExprLagrangian.parse("v^2/(2*q^2)", 1)


def harmonic(omega):
    return ExprLagrangian.parse("v^2/2 - w^2*q^2/2", 1, {"w": omega})


def harmonic_action(omega, T, q0, q1):
    return (omega / (2 * np.sin(omega * T))) * (
        (q0**2 + q1**2) * np.cos(omega * T) - 2 * q0 * q1
    )


def fd_gradients(problem, h=1e-5):
    """Independent FD oracle for (dS/dq0, dS/dq1)."""
    d = problem.dimension

    def S(q0, q1):
        t = solve_bvp(problem.with_endpoints(q0=q0, q1=q1))
        return action(t)

    g0 = np.empty(d)
    g1 = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g0[i] = (S(problem.q0 + e, problem.q1) - S(problem.q0 - e, problem.q1)) / (2 * h)
        g1[i] = (S(problem.q0, problem.q1 + e) - S(problem.q0, problem.q1 - e)) / (2 * h)
    return g0, g1


class TestSolve:
    def test_free_particle_line(self):
        traj = solve_bvp(Problem(FREE, 0.0, 1.0, [0.0], [1.0]))
        ts = np.linspace(0, 1, 11)
        assert np.allclose(traj.position(ts)[0], ts, atol=1e-10)
        assert traj.nonfocal

    def test_exponential_coordinates_path(self):
        q0, q1 = 1.0, np.e
        traj = solve_bvp(Problem(EXPCOORD, 0.0, 1.0, [q0], [q1]))
        ts = np.linspace(0, 1, 23)
        want = q0 ** (1 - ts) * q1**ts
        assert np.max(np.abs(traj.position(ts)[0] - want)) < 1e-9

    def test_harmonic_matches_sinusoid(self):
        omega, T, q0, q1 = 1.0, 2.5, 0.3, 1.1
        traj = solve_bvp(Problem(harmonic(omega), 0.0, T, [q0], [q1]))
        ts = np.linspace(0, T, 17)
        want = (q1 - q0 * np.cos(omega * T)) / np.sin(omega * T) * np.sin(
            omega * ts
        ) + q0 * np.cos(omega * ts)
        assert np.max(np.abs(traj.position(ts)[0] - want)) < 1e-8

    def test_endpoints_exact(self):
        traj = solve_bvp(Problem(EXPCOORD, 0.0, 1.0, [1.0], [2.0]))
        assert abs(traj.position(0.0)[0] - 1.0) < 1e-10
        assert abs(traj.position(1.0)[0] - 2.0) < 1e-10

    def test_el_residual(self):
        traj = solve_bvp(Problem(harmonic(1.0), 0.0, 2.5, [0.3], [1.1]))
        ts = np.linspace(0.1, 2.4, 31)
        res, scale = euler_lagrange_residual(traj, ts)
        assert np.max(np.abs(res)) < 1e-8 * (1 + np.max(np.abs(scale)))

    def test_jacobi_endpoint_values(self):
        traj = solve_bvp(Problem(harmonic(1.0), 0.0, 2.5, [0.3], [1.1]))
        phi0, phi1, _, _ = traj.jacobi(np.array([0.0, 2.5]))
        assert phi0[..., 0] == pytest.approx(np.eye(1))
        assert abs(phi0[..., 1]) < 1e-9
        assert abs(phi1[..., 0]) < 1e-9
        assert phi1[..., 1] == pytest.approx(np.eye(1))

    def test_newton_from_rough_guess(self):
        quartic = ExprLagrangian.parse("v^2/2 - 0.1*q^4", 1)
        traj = solve_bvp(Problem(quartic, 0.0, 1.0, [0.0], [0.5], v0_guess=[0.0]))
        assert abs(traj.position(1.0)[0] - 0.5) < 1e-9

    def test_2d_metric_problem(self):
        lagr = ExprLagrangian.parse(
            "(exp(0.3*q1)*v1^2 + exp(-0.3*q1)*v2^2)/2", 2
        )
        traj = solve_bvp(Problem(lagr, 0.0, 1.0, [0.0, 0.0], [0.4, 0.3]))
        assert traj.nonfocal
        assert np.max(np.abs(traj.position(1.0) - [0.4, 0.3])) < 1e-9


class TestAction:
    def test_constant_lagrangian(self):
        lagr = ExprLagrangian.parse("5", 1)
        # EL is degenerate for a constant L; integrate along a free path by
        # reusing the free-particle trajectory's quadrature grid instead
        traj = solve_bvp(Problem(FREE, 0.0, 2.0, [0.0], [0.0]))
        from spi.numutil import panel_gauss

        nodes, weights = panel_gauss(traj.sol.t, 8)
        q, v = traj.states(nodes)
        assert np.dot(weights, lagr.value(nodes, v, q)) == pytest.approx(10.0)

    def test_free_particle(self):
        traj = solve_bvp(Problem(FREE, 0.0, 1.0, [0.0], [1.0]))
        assert action(traj) == pytest.approx(0.5, abs=1e-12)

    def test_harmonic_closed_form(self):
        omega, T, q0, q1 = 1.0, 2.5, 0.3, 1.1
        traj = solve_bvp(Problem(harmonic(omega), 0.0, T, [q0], [q1]))
        assert action(traj) == pytest.approx(
            harmonic_action(omega, T, q0, q1), abs=1e-8
        )

    def test_exponential_coordinates(self):
        # S = l^2 T / 2 with l = log(q1/q0)/T for the metric 1/q^2
        q0, q1, T = 1.0, np.e, 1.0
        traj = solve_bvp(Problem(EXPCOORD, 0.0, T, [q0], [q1]))
        ell = np.log(q1 / q0) / T
        assert action(traj) == pytest.approx(ell**2 * T / 2, abs=1e-10)


class TestGradients:
    def test_free_particle(self):
        traj = solve_bvp(Problem(FREE, 0.0, 1.0, [0.0], [1.0]))
        g0, g1 = s_gradients(traj)
        assert g0[0] == pytest.approx(-1.0, abs=1e-10)
        assert g1[0] == pytest.approx(1.0, abs=1e-10)

    def test_constant_path(self):
        traj = solve_bvp(Problem(FREE, 0.0, 1.0, [0.7], [0.7]))
        g0, g1 = s_gradients(traj)
        assert abs(g0[0]) < 1e-12
        assert abs(g1[0]) < 1e-12

    @pytest.mark.parametrize(
        "lagr,q0,q1,T",
        [
            (FREE, [0.2], [0.9], 1.0),
            (EXPCOORD, [1.0], [2.0], 1.0),
            (ExprLagrangian.parse("v^2/2 - 0.1*q^4", 1), [0.0], [0.5], 1.0),
        ],
    )
    def test_fd_oracle(self, lagr, q0, q1, T):
        problem = Problem(lagr, 0.0, T, q0, q1)
        traj = solve_bvp(problem)
        g0, g1 = s_gradients(traj)
        f0, f1 = fd_gradients(problem)
        assert np.max(np.abs(g0 - f0)) < 1e-6
        assert np.max(np.abs(g1 - f1)) < 1e-6


class TestVanVleck:
    def test_free_particle(self):
        for T in (0.5, 1.0, 2.0):
            traj = solve_bvp(Problem(FREE, 0.0, T, [0.0], [1.0]))
            W, detW = van_vleck(traj)
            assert W[0, 0] == pytest.approx(1.0 / T, rel=1e-10)
            assert detW == pytest.approx(1.0 / T, rel=1e-10)

    def test_harmonic(self):
        omega, T = 1.0, 2.5
        traj = solve_bvp(Problem(harmonic(omega), 0.0, T, [0.3], [1.1]))
        W, detW = van_vleck(traj)
        assert W[0, 0] == pytest.approx(omega / np.sin(omega * T), rel=1e-9)

    def test_fd_oracle(self):
        problem = Problem(ExprLagrangian.parse("v^2/2 - 0.1*q^4", 1), 0.0, 1.0, [0.0], [0.5])
        traj = solve_bvp(problem)
        W, _ = van_vleck(traj)
        h = 1e-4

        def g1_of_q0(q0):
            t = solve_bvp(problem.with_endpoints(q0=q0))
            return s_gradients(t)[0]

        # W[k,l] = d/dq1^l [-dS/dq0^k]... cross-check via d2 S / dq0 dq1
        def S(q0, q1):
            return action(solve_bvp(problem.with_endpoints(q0=q0, q1=q1)))

        mixed = (
            S(np.array([h]), np.array([0.5 + h]))
            - S(np.array([h]), np.array([0.5 - h]))
            - S(np.array([-h]), np.array([0.5 + h]))
            + S(np.array([-h]), np.array([0.5 - h]))
        ) / (4 * h * h)
        assert abs(W[0, 0] - (-mixed)) < 1e-5


class TestFocal:
    def test_free_particle_always_nonfocal(self):
        for T in (0.1, 1.0, 5.0):
            traj = solve_bvp(Problem(FREE, 0.0, T, [0.0], [1.0]))
            assert nonfocal_check(traj)

    def test_harmonic_focal_at_pi(self):
        with pytest.raises((FocalError, SolveError)):
            traj = solve_bvp(Problem(harmonic(1.0), 0.0, np.pi, [0.0], [0.001]))
            assert not nonfocal_check(traj)

    def test_harmonic_beyond_pi_nonfocal(self):
        traj = solve_bvp(Problem(harmonic(1.0), 0.0, 3 * np.pi / 2, [0.3], [0.4]))
        assert nonfocal_check(traj)


class TestMorseIndex:
    def test_free_particle(self):
        traj = solve_bvp(Problem(FREE, 0.0, 1.0, [0.0], [1.0]))
        assert morse_index(traj) == 0

    def test_harmonic_below_pi(self):
        traj = solve_bvp(Problem(harmonic(1.0), 0.0, 2.5, [0.3], [1.1]))
        assert morse_index(traj) == 0

    def test_harmonic_between_pi_and_2pi(self):
        traj = solve_bvp(Problem(harmonic(1.0), 0.0, 4.0, [0.3], [0.4]))
        assert morse_index(traj) == 1

    def test_harmonic_2d(self):
        lagr = ExprLagrangian.parse(
            "(v1^2+v2^2)/2 - (q1^2+q2^2)/2", 2
        )
        traj = solve_bvp(Problem(lagr, 0.0, 4.0, [0.3, 0.1], [0.4, -0.2]))
        assert morse_index(traj) == 2


@pytest.fixture(scope="module")
def split_data():
    lagr = ExprLagrangian.parse("v^2/2 - 0.1*q^4", 1)
    problem = Problem(lagr, 0.0, 1.0, [0.0], [0.5])
    traj = solve_bvp(problem)
    t = 0.4
    q_mid = traj.position(t)
    p0 = Problem(lagr, 0.0, t, problem.q0, q_mid, v0_guess=traj.v0)
    p1 = Problem(lagr, t, 1.0, q_mid, problem.q1, v0_guess=traj.velocity(t))
    return problem, traj, solve_bvp(p0), solve_bvp(p1), q_mid


class TestGluedPath:
    """Invariants of splitting a trajectory at an interior time."""

    def test_stationarity(self, split_data):
        problem, traj, t0_, t1_, q_mid = split_data
        g = s_gradients(t0_)[1] + s_gradients(t1_)[0]
        assert np.max(np.abs(g)) < 1e-6

    def test_action_additivity(self, split_data):
        problem, traj, t0_, t1_, q_mid = split_data
        assert action(traj) == pytest.approx(action(t0_) + action(t1_), abs=1e-8)

    def test_determinant_composition(self, split_data):
        problem, traj, t0_, t1_, q_mid = split_data
        h = 1e-3
        lagr = problem.lagrangian

        def grad_sum(q):
            s0 = solve_bvp(
                Problem(lagr, 0.0, 0.4, problem.q0, q, v0_guess=t0_.v0)
            )
            s1 = solve_bvp(
                Problem(lagr, 0.4, 1.0, q, problem.q1, v0_guess=t1_.v0)
            )
            return s_gradients(s0)[1] + s_gradients(s1)[0]

        def diff(step):
            return (grad_sum(q_mid + step) - grad_sum(q_mid - step)) / (2 * step)

        hess = float((4 * diff(h / 2) - diff(h)) / 3)
        _, dw = van_vleck(traj)
        _, dw0 = van_vleck(t0_)
        _, dw1 = van_vleck(t1_)
        assert dw == pytest.approx(dw0 * dw1 / abs(hess), rel=1e-5)

    def test_morse_additivity(self, split_data):
        problem, traj, t0_, t1_, q_mid = split_data
        h = 1e-4

        def grad_sum(q):
            s0 = solve_bvp(
                Problem(problem.lagrangian, 0.0, 0.4, problem.q0, q, v0_guess=t0_.v0)
            )
            s1 = solve_bvp(
                Problem(problem.lagrangian, 0.4, 1.0, q, problem.q1, v0_guess=t1_.v0)
            )
            return s_gradients(s0)[1] + s_gradients(s1)[0]

        hess = (grad_sum(q_mid + h) - grad_sum(q_mid - h)) / (2 * h)
        eta_cp = int(np.sum(np.linalg.eigvalsh(np.atleast_2d(hess)) < 0))
        assert morse_index(traj) == morse_index(t0_) + eta_cp + morse_index(t1_)
