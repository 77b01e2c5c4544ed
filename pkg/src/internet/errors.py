"""Exception hierarchy shared by every module.

CLI exit codes are attached to the base classes so ``cli`` can map any
raised error to a documented status without a lookup table.
"""


class InterNetError(Exception):
    exit_code = 1


class ConfigError(InterNetError):
    exit_code = 2


class DataError(InterNetError):
    exit_code = 3


class GeometryError(InterNetError):
    exit_code = 4


class TrainingError(InterNetError):
    exit_code = 5


class CheckpointError(InterNetError):
    exit_code = 6


class ShapeMismatch(InterNetError, ValueError):
    exit_code = 2


class SingularSystem(GeometryError):
    def __init__(self, msg, iteration=None):
        if iteration is not None:
            msg = f"{msg} (at refinement iteration {iteration})"
        super().__init__(msg)
        self.iteration = iteration


class ProjectiveOverflow(GeometryError):
    pass


class MissingPair(DataError):
    pass


class UnreadableImage(DataError):
    pass


class UnknownPreset(DataError, ValueError):
    pass


class DegenerateWarp(DataError):
    pass


class LayerOutOfRange(ConfigError, IndexError):
    pass


class NonFiniteLoss(TrainingError):
    pass


class ResumeMismatch(TrainingError):
    pass


class TeacherIncomplete(CheckpointError):
    pass


class CheckpointShapeMismatch(CheckpointError):
    pass
