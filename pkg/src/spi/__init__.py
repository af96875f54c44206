"""Semiclassical propagator series for user-defined Lagrangians on R^d.

The package solves the classical two-point boundary value problem, builds
the Green's function of the linearized equations of motion, evaluates
Feynman diagrams against it, and assembles the semiclassical series whose
coefficients are polynomials in the formal symbol D0 = delta(0).  A CLI and
check drivers (composition law, coordinate invariance, divergence reports)
live in :mod:`spi.harness` / :mod:`spi.cli`.
"""

from spi.expr import (
    ExprLagrangian,
    Expression,
    Jet,
    JetSpace,
    TransformedLagrangian,
    evaluate,
    jet_eval,
    parse,
    velocity_hessian,
)
from spi.graphs import Diagram, automorphism_order, enumerate_diagrams, pairings
from spi.stphase import AsymptoticExpansion, SymTensor, formal_integral, gaussian_moment, numeric_oracle
from spi.classical import Problem, SolverConfig, Trajectory, morse_index, solve_bvp
from spi.green import GreenRep, build_green, operator_residual
from spi.amplitude import (
    DeltaPoly,
    PropagatorResult,
    QuadConfig,
    assemble,
    divergence_report,
    evaluate_diagram,
    s_derivative_trees,
    tadpole_logdet_check,
)
from spi.harness import CheckReport, RunConfig, coordinate_check, fubini_check

__all__ = [
    "ExprLagrangian",
    "Expression",
    "Jet",
    "JetSpace",
    "TransformedLagrangian",
    "evaluate",
    "jet_eval",
    "parse",
    "velocity_hessian",
    "Diagram",
    "automorphism_order",
    "enumerate_diagrams",
    "pairings",
    "AsymptoticExpansion",
    "SymTensor",
    "formal_integral",
    "gaussian_moment",
    "numeric_oracle",
    "Problem",
    "SolverConfig",
    "Trajectory",
    "morse_index",
    "solve_bvp",
    "GreenRep",
    "build_green",
    "operator_residual",
    "DeltaPoly",
    "PropagatorResult",
    "QuadConfig",
    "assemble",
    "divergence_report",
    "evaluate_diagram",
    "s_derivative_trees",
    "tadpole_logdet_check",
    "CheckReport",
    "RunConfig",
    "coordinate_check",
    "fubini_check",
]
