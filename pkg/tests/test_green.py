"""Green's function construction, structure, and operator identities."""

import numpy as np
import pytest

from spi.classical import Problem, solve_bvp
from spi.expr import ExprLagrangian
from spi.green import build_green, operator_residual

FREE = ExprLagrangian.parse("v^2/2", 1)
EXPCOORD = ExprLagrangian.parse("v^2/(2*q^2)", 1)


@pytest.fixture(scope="module")
def free_rep():
    return build_green(solve_bvp(Problem(FREE, 0.0, 1.0, [0.0], [1.0])))


@pytest.fixture(scope="module")
def expcoord_rep():
    return build_green(solve_bvp(Problem(EXPCOORD, 0.0, 1.0, [1.0], [np.e])))


@pytest.fixture(scope="module")
def harmonic_rep():
    lagr = ExprLagrangian.parse("v^2/2 - q^2/2", 1)
    return build_green(solve_bvp(Problem(lagr, 0.0, 2.5, [0.3], [1.1])))


def grid(rep, n=50):
    ts = np.linspace(rep.traj.problem.t0, rep.traj.problem.t1, n)
    S, T = np.meshgrid(ts, ts, indexing="ij")
    return S.ravel(), T.ravel()


class TestClosedForms:
    def test_free_particle(self, free_rep):
        s, t = grid(free_rep)
        got = free_rep.evaluate(s, t).smooth[0, 0]
        want = np.minimum(s, t) * (1.0 - np.maximum(s, t))
        assert np.max(np.abs(got - want)) < 1e-9

    def test_exponential_coordinates(self, expcoord_rep):
        # gamma(s) gamma(t) ((s+t)/2 - s t / T - |t-s|/2) on [0, 1]
        s, t = grid(expcoord_rep)
        gam = lambda x: np.e**x
        want = gam(s) * gam(t) * (0.5 * (s + t) - s * t - 0.5 * np.abs(t - s))
        got = expcoord_rep.evaluate(s, t).smooth[0, 0]
        assert np.max(np.abs(got - want)) < 1e-8

    def test_boundary_vanishing(self, expcoord_rep):
        ss = np.linspace(0, 1, 37)
        for tb in (0.0, 1.0):
            val = expcoord_rep.evaluate(ss, np.full_like(ss, tb)).smooth
            assert np.max(np.abs(val)) < 1e-10
            val = expcoord_rep.evaluate(np.full_like(ss, tb), ss).smooth
            assert np.max(np.abs(val)) < 1e-10


class TestStructure:
    def test_symmetry(self, harmonic_rep):
        s, t = grid(harmonic_rep, 29)
        a = harmonic_rep.evaluate(s, t).smooth
        b = harmonic_rep.evaluate(t, s).smooth
        assert np.max(np.abs(a - np.swapaxes(b, 0, 1))) < 1e-9

    def test_jump_condition(self, expcoord_rep):
        # dG/dt jumps by -a^{-1}(s) across t = s
        for s in (0.25, 0.5, 0.8):
            eps = 1e-9
            up = expcoord_rep.evaluate(s, s + eps, 0, 1).smooth
            dn = expcoord_rep.evaluate(s, s - eps, 0, 1).smooth
            ainv = expcoord_rep.a_inv(np.asarray(s))
            assert np.max(np.abs((up - dn) + ainv)) < 1e-7

    def test_free_particle_jump(self, free_rep):
        eps = 1e-9
        up = free_rep.evaluate(0.3, 0.3 + eps, 0, 1).smooth
        dn = free_rep.evaluate(0.3, 0.3 - eps, 0, 1).smooth
        assert (up - dn)[0, 0] == pytest.approx(-1.0, abs=1e-6)

    def test_delta_coefficient(self, expcoord_rep):
        s = np.array([0.2, 0.6])
        t = np.array([0.7, 0.3])
        val = expcoord_rep.evaluate(s, t, 1, 1)
        gam_t = np.e**t
        assert val.delta_coeff is not None
        assert np.allclose(val.delta_coeff[0, 0], gam_t**2, rtol=1e-9)
        assert expcoord_rep.evaluate(s, t, 0, 0).delta_coeff is None
        assert expcoord_rep.evaluate(s, t, 1, 0).delta_coeff is None

    def test_mixed_derivative_closed_form(self, expcoord_rep):
        # differentiate G = g(s) g(t) (½(s+t) - s t/T - ½|t-s|) directly:
        # smooth part = l²G - l g g (s+t)/T + l g g - g g / T  (here l = T = 1)
        s, t = grid(expcoord_rep, 21)
        off = np.abs(s - t) > 1e-12
        s, t = s[off], t[off]
        gam = lambda x: np.e**x
        G = gam(s) * gam(t) * (0.5 * (s + t) - s * t - 0.5 * np.abs(t - s))
        want = G + gam(s) * gam(t) * (1.0 - (s + t) - 1.0)
        got = expcoord_rep.evaluate(s, t, 1, 1).smooth[0, 0]
        assert np.max(np.abs(got - want)) < 1e-7

    def test_modes_agree(self, harmonic_rep):
        s, t = grid(harmonic_rep, 41)
        a = harmonic_rep.evaluate(s, t, mode="vanvleck").smooth
        b = harmonic_rep.evaluate(s, t, mode="vop").smooth
        assert np.max(np.abs(a - b)) < 1e-8


class TestOperator:
    def test_free_particle_offdiag(self, free_rep):
        r = operator_residual(free_rep, 0.3, 0.7)
        assert np.max(np.abs(r)) < 1e-6

    def test_exponential_coordinates_offdiag(self, expcoord_rep):
        rng = np.random.default_rng(11)
        for _ in range(6):
            s, t = rng.uniform(0.05, 0.95, size=2)
            if abs(s - t) < 0.1:
                continue
            r = operator_residual(expcoord_rep, s, t)
            assert np.max(np.abs(r)) < 1e-6

    def test_harmonic_offdiag(self, harmonic_rep):
        for (s, t) in [(0.3, 1.7), (2.0, 0.5), (1.0, 2.2)]:
            r = operator_residual(harmonic_rep, s, t)
            assert np.max(np.abs(r)) < 1e-6

    def test_near_diagonal_rejected(self, free_rep):
        with pytest.raises(ValueError, match="diagonal"):
            operator_residual(free_rep, 0.5, 0.5 + 1e-7)

    def test_reproducing_property(self, free_rep, harmonic_rep):
        # manufactured source: xi(t) = sin(pi t / T) => f = D[xi]
        for rep in (free_rep, harmonic_rep):
            traj = rep.traj
            t0, t1 = traj.problem.t0, traj.problem.t1
            T = t1 - t0
            from spi.numutil import panel_gauss

            ss = np.linspace(t0 + 0.1 * T, t1 - 0.1 * T, 7)
            for s in ss:
                # split panels at the kink of G(s, -)
                breaks = np.unique(
                    np.concatenate([np.linspace(t0, s, 60), np.linspace(s, t1, 60)])
                )
                nodes, weights = panel_gauss(breaks, 8)
                x = np.pi * (nodes - t0) / T
                xi = np.sin(x)
                ddxi = -((np.pi / T) ** 2) * np.sin(x)
                # operator for these 1d problems: -a xi'' + Q xi, constant a=1
                f = -ddxi if rep is free_rep else -ddxi - xi
                g = rep.evaluate(np.full_like(nodes, s), nodes).smooth[0, 0]
                got = np.dot(weights, g * f)
                want = np.sin(np.pi * (s - t0) / T)
                assert got == pytest.approx(want, abs=1e-7)


class TestBuild:
    def test_cross_validation_recorded(self, expcoord_rep):
        assert expcoord_rep.check_residual < 1e-8

    def test_out_of_domain(self, free_rep):
        with pytest.raises(ValueError, match="domain"):
            free_rep.evaluate(1.5, 0.5)
