"""Exception hierarchy shared across the package."""


class CrilError(Exception):
    """Base class for every error raised deliberately by crillab."""


class InvalidArgument(CrilError, ValueError):
    pass


class ContractViolation(CrilError, RuntimeError):
    """An operation was called on a state that its precondition forbids."""


class CollectionError(CrilError, RuntimeError):
    """The scripted expert failed to solve an episode."""


class DatasetError(CrilError):
    pass


class MissingMetadataError(DatasetError, FileNotFoundError):
    pass


class LayoutError(DatasetError):
    pass


class ShapeMismatchError(DatasetError, ValueError):
    pass


class ActionRangeError(DatasetError, ValueError):
    pass


class CheckpointError(CrilError, ValueError):
    pass


class InconsistencyError(CrilError, RuntimeError):
    pass


class UndefinedMetricError(CrilError, ValueError):
    pass


class NonFiniteLossError(CrilError, FloatingPointError):
    """Training produced a NaN or inf loss.

    ``snapshot`` carries the iteration, the loss values seen at that
    iteration and the global parameter norm of the offending network.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})


class ConfigError(CrilError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
