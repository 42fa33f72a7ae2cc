"""Numerical machinery for a self-similar blow-up construction with an
inverse-square potential: closed forms, singular-ODE Green's solvers,
approximate profile assembly, generalized-eigenfunction transform,
transference kernel and the explicit time parametrix."""

from .core import (
    ClosedForms,
    DomainError,
    ExponentLattice,
    GeneralizedSeries,
    OutOfRange,
    PotentialParams,
    make_params,
    params_from_beta,
)

__version__ = "0.1.0"

__all__ = [
    "ClosedForms",
    "DomainError",
    "ExponentLattice",
    "GeneralizedSeries",
    "OutOfRange",
    "PotentialParams",
    "make_params",
    "params_from_beta",
    "__version__",
]
