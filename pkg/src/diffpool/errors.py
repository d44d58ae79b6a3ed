"""Exception types shared across the package."""


class DiffpoolError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(DiffpoolError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(DiffpoolError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ParseError(DiffpoolError, ValueError):
    """A model or dataset file is malformed."""


class ContractViolation(DiffpoolError, RuntimeError):
    """A cached trace or workspace no longer matches the live objects."""


class OracleError(DiffpoolError, RuntimeError):
    """The finite-difference oracle hit a non-finite evaluation."""


class TrainingError(DiffpoolError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss or gradient."""
