"""Exception types shared across the package."""


class PromptDTError(Exception):
    """Base class for all package errors."""


class ShapeError(PromptDTError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(PromptDTError):
    """A caller violated a documented precondition."""


class ConfigError(PromptDTError):
    """An invalid configuration value."""


class DataError(PromptDTError):
    """Dataset contents cannot satisfy a sampling request."""


class FormatError(PromptDTError):
    """A serialized file is malformed or inconsistent."""


class AdapterError(PromptDTError):
    """A low-rank adapter does not match its target weight."""


class SequenceLengthError(PromptDTError):
    """An input sequence exceeds the model's maximum length."""


class NonFiniteLossError(PromptDTError):
    """A training loss produced NaN or Inf; the step was aborted."""
