"""Exception hierarchy mapped to process exit codes.

Three failure families: configuration/input validation (exit 2), numerical
failures (exit 3), and filesystem IO (exit 4). The CLI translates any
DrybedError into its family's exit code; everything else is a bug.
"""

from __future__ import annotations


class DrybedError(Exception):
    """Base class; carries the CLI exit code for its failure family."""

    exit_code = 1


class ConfigError(DrybedError):
    """Bad or missing configuration values, malformed input files."""

    exit_code = 2


class SchemaError(ConfigError):
    """An input table does not match its declared schema."""


class NumericalError(DrybedError):
    """A numerical procedure failed to produce a usable result."""

    exit_code = 3


class NewtonError(NumericalError):
    """Newton iteration exhausted or stalled; carries the best iterate."""

    def __init__(self, message, best=None, residual_norm=None):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm


class SingularJacobianError(NumericalError):
    """Jacobian (or constraint block) numerically singular."""


class IllConditionedError(NumericalError):
    """A matrix breached its condition-number bound."""


class SpectralOverlapError(NumericalError):
    """Sylvester operands share spectrum; the equation is singular."""


class ConvergenceError(NumericalError):
    """Fixed-point iteration did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DimensionCapError(NumericalError):
    """Dense matrix-function dimension exceeds the configured cap."""


class RankDeficiencyError(NumericalError):
    """Matrix does not have the full column rank the operation requires."""


class DomainError(NumericalError):
    """Physical quantity outside its admissible domain."""


class DegenerateFeedError(NumericalError):
    """Division guard tripped: holdup mass or solid feed is (near) zero."""


class IoError(DrybedError):
    """Filesystem-level failure: missing path, unreadable or unwritable file."""

    exit_code = 4
