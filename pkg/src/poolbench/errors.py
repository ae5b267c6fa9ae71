"""Exception hierarchy. Every error raised by the library derives from PoolbenchError."""


class PoolbenchError(Exception):
    pass


class BadMagic(PoolbenchError):
    pass


class TruncatedFile(PoolbenchError):
    pass


class NonFiniteValue(PoolbenchError):
    def __init__(self, index, value=None):
        self.index = index
        super().__init__(f"non-finite value {value!r} at flat index {index}")


class IoFailure(PoolbenchError):
    pass


class DuplicateId(PoolbenchError):
    pass


class LabelOutOfRange(PoolbenchError):
    pass


class MalformedLine(PoolbenchError):
    def __init__(self, line_no, reason):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}")


class ChannelMismatch(PoolbenchError):
    pass


class InvalidSpec(PoolbenchError):
    pass


class DegenerateStd(PoolbenchError):
    pass


class InvalidDim(PoolbenchError):
    pass


class DimMismatch(PoolbenchError):
    pass


class TooFewPixels(PoolbenchError):
    pass


class LeakageError(PoolbenchError):
    """A fitting step was handed ids that belong to the test side of a split."""


class SingularInput(PoolbenchError):
    pass


class NonFinite(PoolbenchError):
    pass


class LengthMismatch(PoolbenchError):
    pass


class EmptyInput(PoolbenchError):
    pass


class ClassTooSmall(PoolbenchError):
    pass


class DegenerateGeography(PoolbenchError):
    pass


class UnknownId(PoolbenchError):
    pass


class OverlappingIds(PoolbenchError):
    pass


class InvalidSplit(PoolbenchError):
    pass


class MissingCell(PoolbenchError):
    pass


class UnknownFormat(PoolbenchError):
    pass


class ConfigError(PoolbenchError):
    pass
