"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto stable exit codes: input problems exit 2,
configuration/checkpoint incompatibilities exit 3, broken internal
invariants exit 4.
"""


class RecRLError(Exception):
    """Base class for all package errors."""


class ContractViolation(RecRLError, ValueError):
    """A caller broke an operation's precondition (shape, range, state)."""


class NumericError(RecRLError, ArithmeticError):
    """A computation produced NaN or Inf."""


class InputError(RecRLError):
    """Bad user-supplied input: files, columns, config syntax."""


class DataFormatError(InputError):
    """Malformed dataset file or descriptor."""


class DataError(InputError):
    """Well-formed input whose content is unusable (e.g. an empty split)."""


class ConfigError(RecRLError):
    """Inconsistent configuration (e.g. paradigm/policy mismatch, bad hyperparameter)."""


class CheckpointError(ConfigError):
    """A checkpoint does not match the configuration it is loaded against."""
