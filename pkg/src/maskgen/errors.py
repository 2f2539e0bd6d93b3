"""Exception types shared across the package."""


class MaskGenError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskGenError, ValueError):
    """Invalid configuration value or incompatible components.

    ``key`` names the offending configuration key when one applies.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ArgumentError(MaskGenError, ValueError):
    """Bad call argument (shape mismatch, out-of-range timestep, ...)."""


class TokenizationError(MaskGenError, KeyError):
    def __init__(self, token, message=None):
        self.token = token
        super().__init__(message or f"unknown token {token!r}")

    def __str__(self):
        return self.args[0]


class MaskValidationError(MaskGenError, ValueError):
    """Mask is not binary, or is empty where content is required."""


class ConsistencyError(MaskGenError, ValueError):
    """Attention maps and masks refer to different subject sets."""


class SchemaError(MaskGenError, ValueError):
    """Checkpoint file is malformed or does not match the model layout."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NonFiniteLossError(MaskGenError, FloatingPointError):
    def __init__(self, step, phase, terms):
        self.step = step
        self.phase = phase
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at {phase} step {step}: {detail}")


class DataIOError(MaskGenError, OSError):
    """File could not be read or written; ``path`` names it."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
