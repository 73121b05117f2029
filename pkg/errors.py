"""
Exception hierarchy for the entailment toolkit.
Every error raised by the library derives from DomainError and from the builtin
that matches its meaning, so callers may catch either.
"""


class DomainError(Exception):
    """Base class for library errors (CLI exit code 2)"""


class DimensionError(DomainError, ValueError):
    """Tensor shapes do not agree"""


class TokenIndexError(DomainError, IndexError):
    """Token id outside the embedding table"""


class TargetIndexError(DomainError, IndexError):
    """Class target outside the logit range"""


class InvalidTensorError(DomainError, ValueError):
    """Tensor holds NaN or Inf"""


class StateError(DomainError, RuntimeError):
    """Operation not allowed in the current state"""


class InputError(DomainError, ValueError):
    """Caller-supplied data violates a precondition"""


class ConfigError(DomainError, ValueError):
    """Invalid configuration"""


class FormatError(DomainError, ValueError):
    """Malformed file or artifact"""


class LabelValidationError(DomainError, ValueError):
    """Dataset label outside the task's class range"""


class CompatibilityError(DomainError, RuntimeError):
    """Artifact does not match the loaded backbone"""


class ConflictError(DomainError, RuntimeError):
    """Name already registered"""


class UsageError(Exception):
    """Bad command line (CLI exit code 1)"""
