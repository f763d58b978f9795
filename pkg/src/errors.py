"""
Error hierarchy shared by the pipeline modules, the CLI and the tool server
"""


class HdanError(Exception):
    """Base class for every pipeline failure"""
    exit_code = 1


class ValidationError(HdanError):
    """Bad user input or configuration; the CLI exits with code 2"""
    exit_code = 2


# volume_io
class UnreadableFormat(HdanError):
    pass


class SpacingMissing(HdanError):
    pass


class UnmappedLabelValue(HdanError):
    pass


class DegenerateIntensity(HdanError):
    pass


class InvalidPhantomSpec(ValidationError):
    pass


class GeometryUnderflow(HdanError):
    pass


class IOFailure(HdanError):
    pass


# patching
class PatchLargerThanVolume(ValidationError):
    pass


class OriginOutOfBounds(HdanError):
    pass


class GridMismatch(HdanError):
    pass


# network
class InvalidConfig(ValidationError):
    pass


class BadInputShape(ValidationError):
    pass


class ReductionMismatch(ValidationError):
    pass


class OddDims(HdanError):
    pass


class CheckpointMismatch(ValidationError):
    pass


# loss
class EmptyHistogram(HdanError):
    pass


class ShapeMismatch(HdanError):
    pass


# training
class DivergenceDetected(HdanError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# metrics
class BothEmpty(HdanError):
    pass


class EmptyMask(HdanError):
    pass


class EmptySet(HdanError):
    pass


# assessment
class GroupTooSmall(ValidationError):
    pass
