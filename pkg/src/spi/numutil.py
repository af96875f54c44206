"""Shared numerics: Gauss-Legendre rules, order-chamber maps, bumps, FD."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

__all__ = [
    "gauss_legendre",
    "panel_gauss",
    "chamber_quadrature",
    "smooth_bump",
    "central_jacobian",
    "richardson_jacobian",
]


@lru_cache(maxsize=None)
def gauss_legendre(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def panel_gauss(breaks, n):
    """Composite Gauss-Legendre nodes/weights over consecutive panels."""
    breaks = np.asarray(breaks, dtype=float)
    x, w = gauss_legendre(n)
    lo = breaks[:-1, None]
    hi = breaks[1:, None]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    nodes = (mid + half * x[None, :]).ravel()
    weights = (half * w[None, :]).ravel()
    return nodes, weights


def chamber_quadrature(num_classes, order, t0, t1):
    """Iterate order chambers of [t0,t1]^k with tensor GL nodes per chamber.

    Yields (times, weights) with times of shape (k, P); k! chambers in
    total, each mapped from the unit cube so the integrand stays smooth.
    """
    k = num_classes
    T = t1 - t0
    x, w = gauss_legendre(order)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    grids = np.meshgrid(*([u] * k), indexing="ij")
    U = np.stack([g.ravel() for g in grids])  # (k, P)
    wgrids = np.meshgrid(*([wu] * k), indexing="ij")
    W = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0)
    # sorted coordinates: y_j = prod_{i >= j} u_i, ascending in j
    Y = np.cumprod(U[::-1], axis=0)[::-1]
    jac = np.prod(U ** np.arange(k)[:, None], axis=0)
    times_sorted = t0 + T * Y
    weights = W * jac * T**k
    for perm in itertools.permutations(range(k)):
        times = np.empty_like(times_sorted)
        for j, c in enumerate(perm):
            times[c] = times_sorted[j]
        yield times, weights


def smooth_bump(x, lo, hi, flat=0.6):
    """Smooth cutoff: 1 on the inner ``flat`` fraction of [lo, hi], 0 at the ends.

    A Gaussian-mollified step centered mid-transition; the width is chosen
    so the profile is flat inside and zero at the boundary to well below
    double precision, making boundary contributions to oscillatory
    integrals negligible at every order.
    """
    from scipy.special import erf

    x = np.asarray(x, dtype=float)
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    s = np.abs(x - c) / h
    t0 = 0.5 * (flat + 1.0)
    sigma = (1.0 - flat) / 16.0
    return 0.5 * (1.0 - erf((s - t0) / (np.sqrt(2.0) * sigma)))


def central_jacobian(f, x, h):
    """Central-difference Jacobian of f: R^n -> (array) at x, step h."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def richardson_jacobian(f, x, h):
    """Jacobian by central differences at steps h and h/2, extrapolated."""
    d1 = central_jacobian(f, x, h)
    d2 = central_jacobian(f, x, h / 2.0)
    return (4.0 * d2 - d1) / 3.0
