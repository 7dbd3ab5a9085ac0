"""
Exception hierarchy for labelnav.
"""


class LabelnavError(Exception):
    """Base class for every error raised by the library."""


class DimensionError(LabelnavError, ValueError):
    """Operand shapes do not agree."""


class GradientKeyError(LabelnavError, KeyError):
    """Gradient dictionary is not keyed like the parameters it updates."""


class NonDeterministicLossError(LabelnavError):
    """A loss function returned different values for identical inputs."""


class FrozenParametersError(LabelnavError):
    """An update was attempted on a frozen parameter store."""


class InvalidActionError(LabelnavError, ValueError):
    """Action id outside the six-action set."""


class SceneGenerationError(LabelnavError):
    """A scene or episode could not be generated with the requested layout."""


class UnreachableTargetError(LabelnavError):
    """No success-satisfying state can be reached from the start state."""


class PerceptionError(LabelnavError, ValueError):
    """Bad attribute names, empty attribute sets or invisible objects."""


class NotTrainedError(LabelnavError):
    """A generator was used before it was trained."""


class BankSizeError(LabelnavError, ValueError):
    """The generated-feature bank does not hold one map per unknown class."""


class ScheduleViolationError(LabelnavError):
    """A parameter update was requested outside its allowed schedule."""


class EmptyBatchError(LabelnavError, ValueError):
    """An operation needs at least one element."""


class InvalidFlagsError(LabelnavError, ValueError):
    """Ablation flags violate the module dependency order."""


class CheckpointMismatchError(LabelnavError):
    """A checkpoint does not match the active configuration."""


class EmptyResultsError(LabelnavError, ValueError):
    """Metrics were requested over an empty result set."""
