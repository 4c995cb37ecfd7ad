"""Exception types shared across the package."""


class SotGlpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SotGlpError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(SotGlpError, ValueError):
    """Input is well-shaped but numerically degenerate (zero rows, empty sets)."""


class ContractError(SotGlpError, ValueError):
    """A documented precondition was violated."""


class SizeError(SotGlpError, ValueError):
    """A size parameter is outside its allowed range."""


class NonFiniteError(SotGlpError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(SotGlpError, ValueError):
    """Invalid configuration value."""


class FormatError(SotGlpError, ValueError):
    """Malformed or incompatible serialized file."""


class VersionError(FormatError):
    """Serialized file carries an unsupported format_version."""


class GenerationError(SotGlpError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DivergenceError(SotGlpError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last finite state (a dict as produced by
    ``train.make_checkpoint``) and ``step`` the global step that failed.
    """

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
