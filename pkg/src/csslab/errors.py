"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 2 (argparse),
ConfigurationError/DomainError exit 3, NumericsError and subclasses exit 4.
"""


class CsslabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CsslabError):
    """Invalid sizes, enum values, or parameter combinations at setup time."""


class DomainError(CsslabError):
    """Arguments outside the mathematical validity region of an operation."""


class ShapeError(CsslabError):
    """Grid/equivariance-index mismatch between fields."""


class NumericsError(CsslabError):
    """NaN/Inf contamination or a failed linear solve."""


class IterationError(NumericsError):
    """Fixed-point or Newton iteration failed to converge."""

    def __init__(self, message, last_residual=None):
        super().__init__(message)
        self.last_residual = last_residual


class OutsideTubeError(IterationError):
    """Decomposition Newton did not converge: data too far from the soliton family."""


class RegimeExitError(CsslabError):
    """A modulation iterate left the admissible parameter region (e.g. b <= 0)."""


class FrameCollapseError(CsslabError):
    """Renormalized-frame transport lost its modulation data mid-run."""


class BracketingError(CsslabError):
    """Shooting endpoints classified identically; no sign change to bisect."""

    def __init__(self, message, runs=None):
        super().__init__(message)
        self.runs = runs or []
