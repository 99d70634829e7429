"""Exception hierarchy shared across the package."""


class RsdmdError(Exception):
    """Base class for all package errors."""

    code = "error"


class ConfigError(RsdmdError, ValueError):
    code = "config_error"


class InvalidInput(RsdmdError, ValueError):
    code = "invalid_input"


class ShapeMismatch(InvalidInput):
    code = "shape_mismatch"


class IntegrationDiverged(RsdmdError, FloatingPointError):
    """Raised when an SDE step produces non-finite values."""

    code = "integration_diverged"

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class UnsupportedDictionary(RsdmdError, TypeError):
    code = "unsupported_dictionary"


class SingularGram(RsdmdError, ArithmeticError):
    code = "singular_gram"


class StaleCache(RsdmdError, RuntimeError):
    code = "stale_cache"


class NonFiniteUpdate(RsdmdError, FloatingPointError):
    code = "non_finite_update"


class ArchitectureMismatch(RsdmdError, ValueError):
    code = "architecture_mismatch"


class ActionOutOfRange(RsdmdError, IndexError):
    code = "action_out_of_range"


class InsufficientData(RsdmdError, ValueError):
    code = "insufficient_data"


class DegenerateArms(RsdmdError, ValueError):
    code = "degenerate_arms"
