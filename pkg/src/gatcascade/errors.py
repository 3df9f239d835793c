"""Exception types shared across the package."""


class GatCascadeError(Exception):
    """Base class for all package errors."""


class ShapeError(GatCascadeError, ValueError):
    """Operand shapes do not agree."""


class GraphError(GatCascadeError, ValueError):
    """A landmark graph is too small (fewer than two nodes)."""


class ContractError(GatCascadeError, ValueError):
    """A call violated an operation precondition."""


class NumericError(GatCascadeError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class BehindCameraError(GatCascadeError, ValueError):
    """A model point projects from behind (or onto) the camera plane."""


class DegenerateInputError(GatCascadeError, ValueError):
    """Input geometry cannot support the requested computation."""


class EmptyInputError(GatCascadeError, ValueError):
    """A reduction over zero items was requested."""


class ConfigError(GatCascadeError, ValueError):
    """Invalid or unknown configuration."""


class FormatError(GatCascadeError, ValueError):
    """A file does not follow its declared binary or text format."""


class TrainingError(GatCascadeError, RuntimeError):
    """Training aborted; the message carries epoch/batch/block diagnostics."""
