"""Diagram amplitudes along a classical trajectory.

A vertex of valence n at time tau carries the tensor of n-th derivatives of
the Lagrangian in the doubled leg variables (v-legs | q-legs); a v-leg
differentiates the time argument of the attached propagator.  Each doubly
differentiated propagator splits into a smooth part and a delta part whose
coefficient is the inverse velocity Hessian: delta factors merge time
variables, and one closing an already-merged cycle contributes a factor of
the formal symbol D0 = delta(0).  The surviving piecewise-smooth integrand
is integrated per order chamber of the reduced time cube with tensorized
Gauss-Legendre after mapping each chamber to a box.

Amplitudes are :class:`DeltaPoly` values, polynomials in D0 with real
coefficients; the assembled propagator series keeps its structural
prefactor (phase, determinant, Morse sign) symbolic.
"""

from __future__ import annotations

import itertools
import math
import string
from dataclasses import dataclass, field

import numpy as np

from spi.classical import morse_index, s_gradients, solve_bvp, van_vleck
from spi.green import propagator_block
from spi.numutil import chamber_quadrature, richardson_jacobian
from spi.stphase import SymTensor

__all__ = [
    "AmplitudeError",
    "DeltaPoly",
    "QuadConfig",
    "PropagatorResult",
    "evaluate_diagram",
    "assemble",
    "s_derivative_trees",
    "tadpole_logdet_check",
    "divergence_report",
]

_LETTERS = string.ascii_lowercase[:25]  # 'z' reserved for the batch axis


class AmplitudeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeltaPoly:
    """Polynomial in the formal symbol D0 = delta(0); coeffs[k] is the D0^k term."""

    coeffs: tuple = (0.0,)

    def __post_init__(self):
        c = tuple(float(x) for x in self.coeffs) or (0.0,)
        while len(c) > 1 and c[-1] == 0.0:
            c = c[:-1]
        object.__setattr__(self, "coeffs", c)

    @staticmethod
    def zero():
        return DeltaPoly((0.0,))

    @staticmethod
    def one():
        return DeltaPoly((1.0,))

    @staticmethod
    def from_map(m):
        if not m:
            return DeltaPoly.zero()
        c = [0.0] * (max(m) + 1)
        for k, v in m.items():
            c[k] = v
        return DeltaPoly(tuple(c))

    @property
    def degree(self):
        return len(self.coeffs) - 1

    @property
    def finite(self):
        """Degree-0 (divergence-free) part."""
        return self.coeffs[0]

    def coeff(self, k):
        return self.coeffs[k] if k <= self.degree else 0.0

    def __add__(self, other):
        if not isinstance(other, DeltaPoly):
            other = DeltaPoly((float(other),))
        n = max(len(self.coeffs), len(other.coeffs))
        return DeltaPoly(
            tuple(self.coeff(k) + other.coeff(k) for k in range(n))
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self + (other * -1.0 if isinstance(other, DeltaPoly) else -other)

    def __mul__(self, other):
        if isinstance(other, DeltaPoly):
            n = len(self.coeffs) + len(other.coeffs) - 1
            c = [0.0] * n
            for i, a in enumerate(self.coeffs):
                for j, b in enumerate(other.coeffs):
                    c[i + j] += a * b
            return DeltaPoly(tuple(c))
        return DeltaPoly(tuple(a * float(other) for a in self.coeffs))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))

    def max_abs(self):
        return max(abs(c) for c in self.coeffs)


@dataclass(frozen=True)
class QuadConfig:
    order: int = 32
    probe_points: int = 9


# ---------------------------------------------------------------------------
# contraction engine


def _merge_classes(num_vertices, delta_edges):
    parent = list(range(num_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    cycles = 0
    for (u, w) in delta_edges:
        ru, rw = find(u), find(w)
        if ru == rw:
            cycles += 1
        else:
            parent[max(ru, rw)] = min(ru, rw)
    roots = sorted({find(v) for v in range(num_vertices)})
    labels = [roots.index(find(v)) for v in range(num_vertices)]
    return labels, len(roots), cycles


class _ClassData:
    """Per-time-class cached trajectory data over one quadrature batch."""

    def __init__(self, traj, times):
        self.traj = traj
        self.times = times
        self._jets = {}
        self._jacobi = None
        self._ainv = None

    def jet(self, order):
        j = self._jets.get(order)
        if j is None:
            j = self.traj.jet(self.times, order, tau_order=0)
            self._jets[order] = j
        return j

    @property
    def jacobi(self):
        if self._jacobi is None:
            self._jacobi = self.traj.jacobi(self.times)
        return self._jacobi

    @property
    def a_inv(self):
        if self._ainv is None:
            self._ainv = self.traj.velocity_hessian(self.times)[1]
        return self._ainv


def _vertex_tensor(jet, n, d, P):
    """(P, 2d, ..., 2d) tensor of n-th Lagrangian derivatives in leg variables."""
    T = np.empty((P,) + (2 * d,) * n)
    for combo in itertools.combinations_with_replacement(range(2 * d), n):
        alpha = [0] * (2 * d + 1)
        for x in combo:
            alpha[1 + x] += 1
        val = jet.partial(tuple(alpha))
        for perm in set(itertools.permutations(combo)):
            T[(slice(None),) + perm] = val
    return T


def _delta_block(ainv, d, P):
    out = np.zeros((P, 2 * d, 2 * d))
    out[:, :d, :d] = np.moveaxis(ainv, -1, 0)
    return out


def _leaf_block(jac, side, d, P):
    phi0, phi1, dphi0, dphi1 = jac
    out = np.empty((P, 2 * d, d))
    out[:, :d, :] = np.moveaxis(dphi0 if side == 0 else dphi1, -1, 0)
    out[:, d:, :] = np.moveaxis(phi0 if side == 0 else phi1, -1, 0)
    return out


def _graph_zero_by_probe(traj, num_vertices, valences, quad):
    """True when some vertex tensor vanishes identically on a probe grid."""
    t0, t1 = traj.problem.t0, traj.problem.t1
    ts = np.linspace(t0, t1, quad.probe_points + 2)[1:-1]
    d = traj.dimension
    jets = {}
    for v in range(num_vertices):
        n = valences[v]
        if n not in jets:
            jets[n] = traj.jet(ts, n, tau_order=0)
        T = _vertex_tensor(jets[n], n, d, ts.size)
        if np.max(np.abs(T)) == 0.0:
            return True
    return False


def _evaluate_graph(traj, green, num_vertices, edges, leaves, quad):
    """Contract a vertex/edge/leaf graph; returns {D0 degree: value}.

    Values are scalars for closed graphs, or arrays with one d-axis per
    leaf.  The overall (-1) per vertex is included.
    """
    d = traj.dimension
    n_leaves = len(leaves)
    edges = [tuple(e) for e in edges]
    valences = [0] * num_vertices
    for (u, w) in edges:
        valences[u] += 1
        valences[w] += 1
    for (v, _side) in leaves:
        valences[v] += 1

    shape = (d,) * n_leaves
    out = {0: np.zeros(shape)}
    if num_vertices == 0:
        raise AmplitudeError("graph needs at least one vertex")
    if _graph_zero_by_probe(traj, num_vertices, valences, quad):
        return out

    t0, t1 = traj.problem.t0, traj.problem.t1
    sign = (-1.0) ** num_vertices

    for mask in range(1 << len(edges)):
        delta_edges = [edges[i] for i in range(len(edges)) if mask >> i & 1]
        smooth_idx = [i for i in range(len(edges)) if not mask >> i & 1]
        labels, k, extra = _merge_classes(num_vertices, delta_edges)
        acc = np.zeros(shape)
        for times, weights in chamber_quadrature(k, quad.order, t0, t1):
            cls = [_ClassData(traj, times[c]) for c in range(k)]
            P = weights.size
            ops, subs = [], []
            nxt = 0
            vertex_legs = [[] for _ in range(num_vertices)]
            for i, (u, w) in enumerate(edges):
                lu, lw = _LETTERS[nxt], _LETTERS[nxt + 1]
                nxt += 2
                vertex_legs[u].append(lu)
                vertex_legs[w].append(lw)
                if mask >> i & 1:
                    ops.append(_delta_block(cls[labels[u]].a_inv, d, P))
                else:
                    ops.append(
                        propagator_block(
                            green,
                            cls[labels[u]].times,
                            cls[labels[w]].times,
                            jac_s=cls[labels[u]].jacobi,
                            jac_t=cls[labels[w]].jacobi,
                        )
                    )
                subs.append("z" + lu + lw)
            leaf_letters = []
            for (v, side) in leaves:
                lv, lf = _LETTERS[nxt], _LETTERS[nxt + 1]
                nxt += 2
                vertex_legs[v].append(lv)
                leaf_letters.append(lf)
                ops.append(_leaf_block(cls[labels[v]].jacobi, side, d, P))
                subs.append("z" + lv + lf)
            for v in range(num_vertices):
                jet = cls[labels[v]].jet(valences[v])
                ops.append(_vertex_tensor(jet, valences[v], d, P))
                subs.append("z" + "".join(vertex_legs[v]))
            ops.append(weights)
            subs.append("z")
            expr = ",".join(subs) + "->" + "".join(leaf_letters)
            acc = acc + np.einsum(expr, *ops, optimize=True)
        key = extra
        out[key] = out.get(key, np.zeros(shape)) + sign * acc
    return out


# ---------------------------------------------------------------------------
# public operations


def evaluate_diagram(diagram, traj, green, quad=None):
    """Amplitude of one closed diagram as a DeltaPoly.

    Symmetry factors and powers of (i hbar) are applied by :func:`assemble`,
    not here.
    """
    quad = quad or QuadConfig()
    if any(m is not None for m in diagram.marks):
        raise AmplitudeError("marked diagrams are not evaluated along a trajectory")
    if not diagram.is_valid():
        raise AmplitudeError("diagram has a vertex of degree < 3")
    if not traj.nonfocal:
        raise AmplitudeError("nonfocal trajectory required")
    raw = _evaluate_graph(
        traj, green, diagram.num_vertices, diagram.edges, [], quad
    )
    return DeltaPoly.from_map({k: float(v) for k, v in raw.items()})


@dataclass
class PropagatorResult:
    """Assembled semiclassical series with its structural prefactor.

    The prefactor (2 pi i hbar)^(-d/2) e^{i S/hbar} (-i)^eta |det W|^(1/2)
    stays symbolic;  series maps the (i hbar) order m = loop order to a
    DeltaPoly, with order 0 pinned at 1.
    """

    dimension: int
    t0: float
    t1: float
    q0: np.ndarray
    q1: np.ndarray
    action: float
    log_abs_det_w: float
    morse_index: int
    series: dict
    diagrams: list = field(default_factory=list)

    def to_document(self):
        return {
            "d": self.dimension,
            "t0": self.t0,
            "t1": self.t1,
            "q0": list(map(float, np.atleast_1d(self.q0))),
            "q1": list(map(float, np.atleast_1d(self.q1))),
            "S": self.action,
            "log_abs_det_W": self.log_abs_det_w,
            "morse_index": self.morse_index,
            "series": [
                {"order": m, "delta_poly": list(self.series[m].coeffs)}
                for m in sorted(self.series)
            ],
            "diagrams": [
                {
                    "canonical": rec["canonical"],
                    "aut": rec["aut"],
                    "order": rec["order"],
                    "contribution": list(rec["contribution"].coeffs),
                }
                for rec in self.diagrams
            ],
        }


def assemble(traj, green, loop_order=2, quad=None):
    """Sum diagrams per loop order, divided by their symmetry factors."""
    from spi.graphs import enumerate_diagrams

    quad = quad or QuadConfig()
    if not traj.nonfocal:
        raise AmplitudeError("nonfocal trajectory required")
    series = {m: DeltaPoly.zero() for m in range(1, loop_order + 1)}
    series[0] = DeltaPoly.one()
    records = []
    diagrams = sorted(
        enumerate_diagrams(loop_order, 0), key=lambda g: (g.loop_order, g.canonical_key)
    )
    for diag in diagrams:
        m = diag.loop_order
        if m < 1 or m > loop_order:
            continue
        aut = diag.automorphism_order
        contribution = evaluate_diagram(diag, traj, green, quad) / aut
        series[m] = series[m] + contribution
        records.append(
            {
                "canonical": diag.dump(),
                "aut": aut,
                "order": m,
                "contribution": contribution,
            }
        )
    _, det_w = van_vleck(traj)
    return PropagatorResult(
        dimension=traj.dimension,
        t0=traj.problem.t0,
        t1=traj.problem.t1,
        q0=traj.problem.q0,
        q1=traj.problem.q1,
        action=traj.action,
        log_abs_det_w=float(np.log(det_w)),
        morse_index=morse_index(traj),
        series=series,
        diagrams=records,
    )


# ---------------------------------------------------------------------------
# trees: derivatives of -S with respect to one endpoint


def _leaf_trees(n):
    """Trees with n ordered leaves and internal vertices of degree >= 3.

    Each tree is (num_internal, internal_edges, leaf_vertex); built by
    attaching leaves one at a time, which produces every shape exactly once.
    """
    trees = [(1, (), (0, 0, 0))]
    for new_leaf in range(3, n):
        grown = []
        for (m, iedges, leafv) in trees:
            for v in range(m):  # widen an internal vertex
                grown.append((m, iedges, leafv + (v,)))
            for idx, (u, w) in enumerate(iedges):  # split an internal edge
                rest = iedges[:idx] + iedges[idx + 1 :]
                grown.append((m + 1, rest + ((u, m), (m, w)), leafv + (m,)))
            for j, v in enumerate(leafv):  # split a leaf edge
                moved = leafv[:j] + (m,) + leafv[j + 1 :]
                grown.append((m + 1, iedges + ((v, m),), moved + (m,)))
        trees = grown
    return trees


def s_derivative_trees(traj, green, n, side=1, quad=None):
    """n-th derivative tensor of -S with respect to one endpoint (side 0|1).

    Sum over leaf-labeled trees of vertex/edge contractions with the leaves
    carrying Jacobi fields; n must be between 3 and 6 (the rank-2 case is
    the van Vleck matrix, computed in closed form elsewhere).
    """
    quad = quad or QuadConfig()
    if not 3 <= n <= 6:
        raise AmplitudeError("tree derivatives cover ranks 3..6")
    if side not in (0, 1):
        raise AmplitudeError("side must be 0 (first endpoint) or 1 (second)")
    d = traj.dimension
    total = np.zeros((d,) * n)
    for (m, iedges, leafv) in _leaf_trees(n):
        raw = _evaluate_graph(
            traj, green, m, iedges, [(v, side) for v in leafv], quad
        )
        for deg, val in raw.items():
            if deg and np.max(np.abs(val)) > 0:
                raise AmplitudeError("tree contraction produced a D0 term")
        total = total + raw[0]
    return SymTensor(total)


def tadpole_logdet_check(traj, green, quad=None, fd_step=1e-2):
    """Compare the one-loop self-contraction with endpoint derivatives of
    log|det W|.

    Returns a dict with, per endpoint, either the residual array (finite
    case) or the D0-degree content when the self-contraction diverges.
    """
    quad = quad or QuadConfig()
    d = traj.dimension
    report = {"divergent": False, "residual": {}, "d0_content": {}}
    ev = {}
    for side in (0, 1):
        raw = _evaluate_graph(traj, green, 1, [(0, 0)], [(0, side)], quad)
        ev[side] = raw
        dcontent = {k: v for k, v in raw.items() if k >= 1 and np.max(np.abs(v)) > 1e-9}
        if dcontent:
            report["divergent"] = True
            report["d0_content"][side] = {k: np.asarray(v) for k, v in dcontent.items()}
    if report["divergent"]:
        return report

    def logdet(side):
        def f(x):
            prob = (
                traj.problem.with_endpoints(q0=x)
                if side == 0
                else traj.problem.with_endpoints(q1=x)
            )
            prob = prob.with_endpoints(v0_guess=_warm_guess(traj, prob))
            t = solve_bvp(prob)
            return np.log(van_vleck(t)[1])

        return f

    for side in (0, 1):
        x0 = traj.problem.q0 if side == 0 else traj.problem.q1
        fd = richardson_jacobian(logdet(side), x0, fd_step)
        report["residual"][side] = np.abs(np.asarray(ev[side][0]) - fd)
    return report


def _warm_guess(traj, prob):
    """Initial-velocity guess for a nearby endpoint problem via Jacobi fields."""
    t0 = traj.problem.t0
    phi0, phi1, dphi0, dphi1 = traj.jacobi(t0)
    dq0 = prob.q0 - traj.problem.q0
    dq1 = prob.q1 - traj.problem.q1
    return traj.v0 + dphi0 @ dq0 + dphi1 @ dq1


def divergence_report(result, tol=1e-6):
    """Per-order map of D0-degree >= 1 coefficients with cancellation flags.

    An order is divergence-free when each degree's total is at most tol
    times the sum of per-diagram magnitudes at that degree.
    """
    out = {}
    for m, poly in sorted(result.series.items()):
        if m == 0:
            continue
        degrees = {}
        free = True
        contributions = [r["contribution"] for r in result.diagrams if r["order"] == m]
        max_deg = max([poly.degree] + [c.degree for c in contributions])
        order_scale = max(
            [1e-300] + [c.max_abs() for c in contributions]
        )
        for k in range(1, max_deg + 1):
            total = poly.coeff(k)
            scale = sum(abs(c.coeff(k)) for c in contributions)
            degrees[k] = {"total": total, "scale": scale}
            # degrees whose contributions are pure roundoff dust are vacuous
            if scale <= 1e-12 * max(1.0, order_scale):
                continue
            if abs(total) > tol * scale:
                free = False
        out[m] = {"degrees": degrees, "divergence_free": free}
    return out
