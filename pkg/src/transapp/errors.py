"""Exception types raised across the package."""


class TransAppError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TransAppError, ValueError):
    pass


class RankError(TransAppError, ValueError):
    pass


class DomainError(TransAppError, ValueError):
    pass


class MaskedRowError(TransAppError, ValueError):
    """A softmax row has no unmasked entry."""


class DegenerateBatchError(TransAppError, ValueError):
    pass


class ParameterError(TransAppError, ValueError):
    pass


class ConfigError(TransAppError, ValueError):
    pass


class CheckpointError(TransAppError):
    pass


class EmptyMaskError(TransAppError, ValueError):
    pass


class DivergenceError(TransAppError, FloatingPointError):
    pass


class IngestionError(TransAppError, ValueError):
    pass


class SeriesTooShortError(TransAppError, ValueError):
    pass


class MergeError(TransAppError, ValueError):
    pass


class TuningError(TransAppError, ValueError):
    pass


class SplitError(TransAppError, ValueError):
    pass


class BalanceError(TransAppError, ValueError):
    pass


class MetricError(TransAppError, ValueError):
    pass
