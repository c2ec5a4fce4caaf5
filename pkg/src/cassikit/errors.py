"""Exception hierarchy shared across the toolkit.

Every failure mode that callers are expected to handle maps to one of these
types; the CLI translates them into stable process exit codes (see cli.py).
"""


class CassikitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CassikitError):
    """Operands have incompatible or invalid extents."""


class ParameterError(CassikitError):
    """A configuration value or argument is out of its valid range."""


class NumericalError(CassikitError):
    """An operation produced NaN/Inf or hit a degenerate denominator."""


class GraphStateError(CassikitError):
    """Backward was requested on a tensor with no recorded graph."""


class OperatorError(CassikitError):
    """A sensing operator violates its structural contract."""


class FormatError(CassikitError):
    """A file does not conform to its container format."""


class MetricError(CassikitError):
    """A metric is undefined for the given inputs."""


class MissingParamsError(CassikitError):
    """A learned component was requested without its weights."""


class DivergenceError(CassikitError):
    """Training produced a non-finite loss."""


class OracleCapError(CassikitError):
    """A dense materialization exceeds the configured size cap."""
