"""Exception hierarchy shared by every splitleak module."""


class SplitLeakError(Exception):
    """Base class. ``stage`` is filled in when a pipeline re-raises a component error."""

    stage: str | None = None


# tensor engine
class ShapeMismatch(SplitLeakError, ValueError):
    pass


class LabelOutOfRange(SplitLeakError, ValueError):
    pass


class NotADistribution(SplitLeakError, ValueError):
    pass


class NonFinite(SplitLeakError, ArithmeticError):
    pass


# model zoo
class InvalidSpec(SplitLeakError, ValueError):
    def __init__(self, layer_index: int, reason: str):
        super().__init__(f"layer {layer_index}: {reason}")
        self.layer_index = layer_index


class InvalidSplitPoint(SplitLeakError, ValueError):
    pass


class DatasetEmpty(SplitLeakError, ValueError):
    pass


class IoFailure(SplitLeakError, OSError):
    pass


class FormatVersionMismatch(SplitLeakError, ValueError):
    pass


class ChecksumMismatch(SplitLeakError, ValueError):
    pass


class MalformedHeader(SplitLeakError, ValueError):
    pass


# wire protocol
class FrameError(SplitLeakError, ValueError):
    """Any structural problem with a frame; never raised for well-formed frames."""


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class Truncated(FrameError):
    pass


class UnknownType(FrameError):
    pass


class TrailingBytes(FrameError):
    pass


class PayloadLengthMismatch(FrameError):
    pass


class InconsistentDim(SplitLeakError, ValueError):
    pass


class ProtocolError(SplitLeakError):
    pass


class Timeout(ProtocolError, TimeoutError):
    pass


# shape estimation
class TooFewSamples(SplitLeakError, ValueError):
    pass


class BlockTooLarge(SplitLeakError, ValueError):
    pass


class DegenerateSignal(SplitLeakError, ValueError):
    pass


class NoPeakFound(SplitLeakError):
    pass


class NoValidFactorization(SplitLeakError, ValueError):
    pass


# surrogate training
class InvalidConfig(SplitLeakError, ValueError):
    pass


class MissingSupervision(SplitLeakError, ValueError):
    pass


class ShapeEstimateMissing(SplitLeakError, ValueError):
    pass


class DivergedLoss(SplitLeakError, ArithmeticError):
    pass


# attacks
class NonFiniteGradient(SplitLeakError, ArithmeticError):
    pass


class DegenerateDirection(SplitLeakError, ArithmeticError):
    pass


class FeedbackUnavailable(SplitLeakError):
    pass
