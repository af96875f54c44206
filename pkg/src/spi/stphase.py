"""Finite-dimensional stationary phase.

Evaluates the asymptotic expansion of an oscillatory integral
``int exp(i A(x)/hbar) dx`` near a nondegenerate critical point from the
derivative tensors of A, as a sum of vacuum diagrams, and provides a direct
quadrature oracle for validating the expansion order by order in hbar.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field

import numpy as np

from spi.graphs import enumerate_diagrams, pairings
from spi.numutil import panel_gauss, smooth_bump

__all__ = [
    "StPhaseError",
    "SymTensor",
    "AsymptoticExpansion",
    "gaussian_moment",
    "formal_integral",
    "numeric_oracle",
]


class StPhaseError(ValueError):
    pass


class SymTensor:
    """Symmetric tensor of small rank, stored dense and symmetrized."""

    def __init__(self, array):
        a = np.asarray(array, dtype=float)
        r = a.ndim
        if r > 1 and len(set(a.shape)) != 1:
            raise StPhaseError("tensor axes must share one dimension")
        if r >= 2:
            sym = np.zeros_like(a)
            import itertools

            perms = list(itertools.permutations(range(r)))
            for p in perms:
                sym += np.transpose(a, p)
            a = sym / len(perms)
        self.array = a

    @property
    def rank(self):
        return self.array.ndim

    @property
    def dimension(self):
        return self.array.shape[0] if self.rank else 1

    def det(self):
        self._need_rank2()
        return float(np.linalg.det(self.array))

    def inv(self):
        self._need_rank2()
        return np.linalg.inv(self.array)

    def signature(self):
        """Number of negative eigenvalues."""
        self._need_rank2()
        return int(np.sum(np.linalg.eigvalsh(self.array) < 0))

    def _need_rank2(self):
        if self.rank != 2:
            raise StPhaseError("rank-2 tensor required")


def _as_array(t):
    return t.array if isinstance(t, SymTensor) else np.asarray(t, dtype=float)


def gaussian_moment(b, a):
    """Sum over pairings of b contracted with (a^-1) tensor powers.

    The bracketed pairing sum of the Gaussian moment formula, without the
    sqrt(det 2 pi a^-1) prefactor; zero for odd rank.
    """
    b = _as_array(b)
    a = _as_array(a)
    if np.any(np.linalg.eigvalsh(a) <= 0):
        raise StPhaseError("quadratic form must be positive-definite")
    n = b.ndim
    if n == 0:
        return float(b)
    if n % 2 == 1:
        return 0.0
    ainv = np.linalg.inv(a)
    letters = string.ascii_lowercase
    total = 0.0
    for match in pairings(n):
        subs = [letters[:n]]
        ops = [b]
        for (i, j) in match:
            subs.append(letters[i - 1] + letters[j - 1])
            ops.append(ainv)
        total += np.einsum(",".join(subs) + "->", *ops)
    return float(total)


def _diagram_value(diagram, edge, vertex_of):
    """Tensor contraction of a diagram: edges carry ``edge``, vertices come
    from ``vertex_of(vertex_index, valence)``."""
    letters = string.ascii_letters
    nxt = 0
    legs = [[] for _ in range(diagram.num_vertices)]
    subs, ops = [], []
    for (u, w) in diagram.edges:
        lu, lw = letters[nxt], letters[nxt + 1]
        nxt += 2
        legs[u].append(lu)
        legs[w].append(lw)
        subs.append(lu + lw)
        ops.append(edge)
    for v in range(diagram.num_vertices):
        t = vertex_of(v, len(legs[v]))
        subs.append("".join(legs[v]))
        ops.append(t)
    return float(np.einsum(",".join(subs) + "->", *ops))


@dataclass
class AsymptoticExpansion:
    """Structured value of the stationary-phase expansion.

    The prefactor (2 pi i hbar)^(N/2) e^{i A(c)/hbar} (-i)^eta |det H|^(-1/2)
    is kept symbolic; ``series`` maps the hbar order to a real coefficient,
    and ``hbar_power`` records an extra global (i hbar) power (-1 when the
    expansion is of an insertion integrand (i hbar)^-1 B exp(...)).
    """

    dimension: int
    phase: float
    eta: int
    det_hessian: float
    series: dict
    hbar_power: int = 0

    def value(self, hbar, eta_convention="-i"):
        """Multiply the structure out numerically at a given real hbar > 0."""
        if eta_convention not in ("-i", "-1"):
            raise StPhaseError("eta_convention must be '-i' or '-1'")
        ih = 1j * hbar
        pref = (2.0 * math.pi * hbar) ** (self.dimension / 2.0) * np.exp(
            1j * math.pi * self.dimension / 4.0
        )
        pref *= np.exp(1j * self.phase / hbar)
        pref *= (-1j if eta_convention == "-i" else -1.0) ** self.eta
        pref *= abs(self.det_hessian) ** -0.5
        pref *= ih**self.hbar_power
        return pref * sum(c * ih**m for m, c in sorted(self.series.items()))


def formal_integral(a_derivs, b_derivs=None, eta=None, loop_order=2, grad_tol=1e-9):
    """Diagram expansion of the oscillatory integral near a critical point.

    a_derivs[r] is the rank-r derivative tensor of the phase function at the
    critical point (r = 0 .. 2*loop_order + 2).  When ``b_derivs`` is given
    the expansion is of the insertion integrand (i hbar)^-1 B exp(...);
    ``b_derivs`` is either a list of derivative tensors of B or a dict
    mapping an hbar order k to such a list (for insertions that are
    themselves hbar series).  The series is keyed so that order 0 is the
    leading term in both cases.
    """
    derivs = [_as_array(t) for t in a_derivs]
    if len(derivs) < 3:
        raise StPhaseError("need phase derivatives at least to rank 2")
    hess = derivs[2]
    N = 1 if hess.ndim == 0 else hess.shape[0]
    hess = hess.reshape(N, N)
    grad = derivs[1].reshape(N)
    hnorm = np.linalg.norm(hess)
    if np.linalg.norm(grad) > grad_tol * (1.0 + hnorm):
        raise StPhaseError("gradient does not vanish at the expansion point")
    det = float(np.linalg.det(hess))
    if abs(det) < 1e-12 * max(1.0, hnorm) ** N:
        raise StPhaseError("degenerate Hessian")
    signature = int(np.sum(np.linalg.eigvalsh(hess) < 0))
    if eta is None:
        eta = signature
    elif eta != signature:
        raise StPhaseError(
            f"eta={eta} inconsistent with Hessian signature {signature}"
        )
    edge = np.linalg.inv(hess)

    def vertex(rank):
        if rank >= len(derivs):
            raise StPhaseError(
                f"phase derivatives up to rank {rank} required, got {len(derivs) - 1}"
            )
        return -derivs[rank].reshape((N,) * rank)

    hbar_power = 0
    if b_derivs is None:
        series = {0: 1.0}
        for diag in enumerate_diagrams(loop_order, 0):
            m = diag.loop_order
            if m < 1 or m > loop_order:
                continue
            val = _diagram_value(diag, edge, lambda v, n: vertex(n))
            series[m] = series.get(m, 0.0) + val / diag.automorphism_order
    else:
        if not isinstance(b_derivs, dict):
            b_derivs = {0: b_derivs}
        b_map = {k: [_as_array(t) for t in ts] for k, ts in b_derivs.items()}
        hbar_power = -1
        series = {}
        marked = enumerate_diagrams(max(0, loop_order - 1), 1)
        for diag in marked:
            for k, bt in sorted(b_map.items()):
                m = 1 + diag.loop_order + k  # 1 - chi + k
                if m < 0 or m > loop_order:
                    continue

                def vertex_of(v, n, bt=bt):
                    if diag.marks[v] is not None:
                        if n >= len(bt):
                            raise StPhaseError(
                                f"insertion derivatives up to rank {n} required"
                            )
                        return bt[n].reshape((N,) * n)
                    return vertex(n)

                val = _diagram_value(diag, edge, vertex_of)
                series[m] = series.get(m, 0.0) + val / diag.automorphism_order

    return AsymptoticExpansion(
        dimension=N,
        phase=float(derivs[0]),
        eta=eta,
        det_hessian=det,
        series=series,
        hbar_power=hbar_power,
    )


def numeric_oracle(
    A,
    B=None,
    region=(-8.0, 8.0),
    hbar=0.1,
    rtol=1e-8,
    start_panels=64,
    max_panels=16384,
    nodes=12,
    flat=0.6,
):
    """Direct quadrature of the oscillatory integral over a box.

    ``region`` is (lo, hi) or a sequence of per-dimension (lo, hi); A and B
    take one array argument per dimension.  A C^2 bump, flat on the inner
    ``flat`` fraction, cuts the integrand off at the boundary.  Panels are
    doubled until the value is stable to ``rtol``.
    """
    if np.ndim(region[0]) == 0 and len(region) == 2 and np.isscalar(region[0]):
        boxes = [tuple(region)]
    else:
        boxes = [tuple(b) for b in region]
    ndim = len(boxes)

    def integral(panels):
        axes = []
        for (lo, hi) in boxes:
            breaks = np.linspace(lo, hi, panels + 1)
            axes.append(panel_gauss(breaks, nodes))
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        xs = [g.ravel() for g in grids]
        w = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0)
        for x, (lo, hi) in zip(xs, boxes):
            w = w * smooth_bump(x, lo, hi, flat)
        f = np.exp(1j * np.asarray(A(*xs)) / hbar)
        if B is not None:
            f = f * np.asarray(B(*xs)) / (1j * hbar)
        return np.sum(w * f)

    panels = start_panels
    prev = integral(panels)
    while panels < max_panels:
        panels *= 2
        cur = integral(panels)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return cur
        prev = cur
    raise StPhaseError("oscillatory quadrature did not converge")
