"""Exception hierarchy shared by every layer of the package."""


class ShortcutBreakerError(Exception):
    """Base class for all package errors."""


class DimensionError(ShortcutBreakerError, ValueError):
    """Shapes are incompatible with the requested operation."""


class ParameterError(ShortcutBreakerError, ValueError):
    """A scalar hyperparameter is out of its valid range."""


class ContractError(ShortcutBreakerError, RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(ShortcutBreakerError, FloatingPointError):
    """A computation produced NaN or Inf."""


class MetricUndefinedError(ShortcutBreakerError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class ConfigError(ShortcutBreakerError, ValueError):
    """A configuration record failed validation.

    ``problems`` lists every offending field, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ContainerError(ShortcutBreakerError, IOError):
    """Base class for binary container read failures."""


class VersionError(ContainerError):
    """Magic bytes or format version do not match."""


class TruncatedError(ContainerError):
    """The file ends before the declared payload does."""


class ChecksumError(ContainerError):
    """Payload CRC32 does not match the stored value."""
