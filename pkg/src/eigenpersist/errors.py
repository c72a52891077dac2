"""Exception hierarchy shared across the package.

Two families matter to callers.  :class:`ConfigError` marks misuse of the
API or malformed scenario input and maps to CLI exit code 2.
:class:`NumericalError` marks a well-posed request whose computation failed
or whose target does not exist (no localized state in the window, iteration
stalled, ...) and maps to CLI exit code 3.
"""

__all__ = [
    "EigenpersistError",
    "ConfigError",
    "NumericalError",
    "GridError",
    "PotentialError",
    "BasisError",
    "DimensionMismatch",
    "SupportViolation",
    "EmbeddedNotFound",
    "WindowNotIsolated",
    "SolveFailure",
    "ExtrapolationDiverged",
    "ProbeDeficient",
    "RankCollapse",
    "NoConvergence",
    "RankDeficient",
    "LeftWindow",
    "ZeroDivisor",
    "NotOrthogonal",
]


class EigenpersistError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(EigenpersistError):
    """Invalid input: bad grid, malformed basis, inconsistent dimensions."""


class NumericalError(EigenpersistError):
    """A computation failed or its target does not exist numerically."""


class GridError(ConfigError):
    """Grid does not satisfy the model's requirements."""


class PotentialError(ConfigError):
    """Potential values violate reality or decay requirements."""


class BasisError(ConfigError):
    """Perturbation basis is complex, dependent, or mismatched."""


class DimensionMismatch(ConfigError):
    """Vector or coefficient length does not match the operator."""


class SupportViolation(ConfigError):
    """A profile claimed to be ball-supported has mass outside the ball."""


class EmbeddedNotFound(NumericalError):
    """No edge-localized eigenvalue in the requested window."""


class WindowNotIsolated(NumericalError):
    """A second localized eigenvalue sits within the isolation radius."""


class SolveFailure(NumericalError):
    """Banded linear solve failed or returned a non-finite vector."""


class ExtrapolationDiverged(NumericalError):
    """Richardson table for the vanishing-damping limit did not contract."""


class ProbeDeficient(NumericalError):
    """Probe set spans too little of the density range to estimate rank."""


class RankCollapse(NumericalError):
    """Density vectors of the probe set do not span an m-dimensional space."""


class NoConvergence(NumericalError):
    """Newton-type iteration exceeded its cap or stagnated."""


class RankDeficient(NumericalError):
    """Jacobian rank is below the codimension; no transversal split."""


class LeftWindow(NumericalError):
    """Iterate left the spectral window around the embedded eigenvalue."""


class ZeroDivisor(NumericalError):
    """Denominator of the closed-form perturbation vanishes on the ball."""


class NotOrthogonal(NumericalError):
    """Orthogonality against the eigenspace could not be enforced."""
