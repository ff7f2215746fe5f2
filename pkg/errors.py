#!/usr/bin/env python3
"""
Exception hierarchy for the GMC ratio lab.
The CLI maps ConfigError to exit status 2 and PreconditionError to 3.
"""


class GmcLabError(Exception):
    """Base class for all errors raised by the lab."""


class ConfigError(GmcLabError):
    """Experiment configuration is malformed or violates a precondition."""


class PreconditionError(GmcLabError):
    """A numerical precondition of an operation does not hold."""


class InvalidMollifierError(PreconditionError):
    """The mollifier profile cannot be normalized into a valid rho."""


class DivergenceError(PreconditionError):
    """The requested quantity diverges (e.g. K0 on the diagonal)."""


class ResolutionError(PreconditionError):
    """The grid does not resolve the finest correlation scale requested."""


class GridError(PreconditionError):
    """Grid, region or subdivision arguments are incompatible."""


class NotPositiveDefiniteError(PreconditionError):
    """Circulant embedding produced a significantly negative eigenvalue."""

    def __init__(self, min_eigenvalue: float, torus_points: int):
        self.min_eigenvalue = min_eigenvalue
        self.torus_points = torus_points
        super().__init__(
            f"Embedding not positive definite: min eigenvalue {min_eigenvalue:.3e} "
            f"on a {torus_points}x{torus_points} torus"
        )


class SpecError(PreconditionError):
    """A Gaussian vector or product functional specification is invalid."""


class WindowError(PreconditionError):
    """A tail-fit window contains degenerate survival estimates."""


class DomainError(PreconditionError):
    """An argument lies outside the mathematical domain of the operation."""


class ExperimentError(PreconditionError):
    """A Monte Carlo experiment produced no usable data."""
