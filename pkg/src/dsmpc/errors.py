"""Exception types shared across the package.

The CLI maps these onto exit codes, so keep the hierarchy flat and stable:
ConfigError -> 2, InfeasibleProblem -> 3, NotConverged -> 4.
"""


class DsmpcError(Exception):
    """Base class for all package errors."""


class ConfigError(DsmpcError):
    """Invalid configuration file, schema, or parameter value."""


class DimensionMismatch(DsmpcError):
    """Vector/matrix dimensions inconsistent with the network model.

    ``subsystem`` identifies the offending block when known.
    """

    def __init__(self, message, subsystem=None):
        super().__init__(message)
        self.subsystem = subsystem


class InfeasibleProblem(DsmpcError):
    """Optimization problem has no feasible point.

    ``violated_rows`` lists (label, residual) pairs for the constraint rows
    that cannot be satisfied, as identified by the phase-1 diagnosis.
    """

    def __init__(self, message, violated_rows=None):
        super().__init__(message)
        self.violated_rows = violated_rows or []


class UnboundedProblem(DsmpcError):
    """Objective unbounded below on the feasible set."""


class NotConverged(DsmpcError):
    """Iterative solver hit its iteration limit before reaching tolerance.

    ``report`` carries the partial solve report for inspection.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnsupportedModel(DsmpcError):
    """Requested operation is outside the supported model class."""
