"""Exception hierarchy shared by every stage of the pipeline."""


class CmaeError(Exception):
    """Base class for all package errors."""


# data
class InvalidHexLength(CmaeError, ValueError):
    pass


class InvalidHexDigit(CmaeError, ValueError):
    def __init__(self, offset, char):
        super().__init__(f"non-hex character {char!r} at offset {offset}")
        self.offset = offset
        self.char = char


class UnknownLabel(CmaeError, ValueError):
    pass


class MalformedRow(CmaeError, ValueError):
    """A dataset row could not be parsed; carries the 1-based line number."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class InsufficientClassSamples(CmaeError, ValueError):
    pass


class InvalidSpec(CmaeError, ValueError):
    pass


class NotAPcap(CmaeError, ValueError):
    pass


class TruncatedCapture(CmaeError, ValueError):
    def __init__(self, packet_index, reason="truncated packet record"):
        super().__init__(f"packet {packet_index}: {reason}")
        self.packet_index = packet_index


# tokenize
class InvalidTokenMap(CmaeError, ValueError):
    pass


class UnknownToken(CmaeError, KeyError):
    pass


# embed
class EmptyVocabulary(CmaeError, ValueError):
    pass


class CorruptEmbeddingFile(CmaeError, ValueError):
    pass


class InvalidSelection(CmaeError, IndexError):
    pass


# nncore / cmae
class ShapeError(CmaeError, ValueError):
    pass


class ConfigError(CmaeError, ValueError):
    pass


class NumericalError(CmaeError, FloatingPointError):
    pass


class GraphError(CmaeError, RuntimeError):
    """Backward was requested on a graph whose tape was already consumed."""


# train
class IncompatibleCheckpoint(CmaeError, ValueError):
    pass


class CorruptCheckpoint(CmaeError, ValueError):
    pass


# eval
class InputError(CmaeError, ValueError):
    pass
