"""
Exception taxonomy for negrank.

Every error raised by the pipeline derives from NegrankError, which carries a
category and the process exit code the CLI reports for it.
"""

from typing import Optional

EXIT_CODES = {
    "usage": 2,
    "config": 2,
    "data": 3,
    "llm": 4,
    "numeric": 5,
    "training": 6,
}


class NegrankError(Exception):
    category = "data"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.category, 1)


# Data / persistence

class MissingFile(NegrankError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"File not found: {path}")
        self.path = str(path)


class MalformedRecord(NegrankError, ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"Malformed record on line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class SpanOutOfRange(NegrankError, ValueError):
    def __init__(self, line_no: int, detail: str = ""):
        message = f"Span out of range on line {line_no}"
        super().__init__(f"{message}: {detail}" if detail else message)
        self.line_no = line_no


class IoFailure(NegrankError, OSError):
    pass


class DuplicateKey(NegrankError, ValueError):
    def __init__(self, key):
        super().__init__(f"Duplicate negative record key: {key}")
        self.key = key


# Tagging / forging

class EmptyQuery(NegrankError, ValueError):
    pass


class EmptyCorpus(NegrankError, ValueError):
    pass


class NoPrimitives(NegrankError, ValueError):
    pass


class BadRatios(NegrankError, ValueError):
    category = "config"


class ExhaustedClass(NegrankError, ValueError):
    def __init__(self, primitive_class: str):
        super().__init__(f"No same-class alternative available for {primitive_class}")
        self.primitive_class = primitive_class


class BatchTooSmall(NegrankError, ValueError):
    pass


class EndpointUnreachable(NegrankError, ConnectionError):
    category = "llm"


class AuthFailure(NegrankError, PermissionError):
    category = "llm"


class ParseFailure(NegrankError, ValueError):
    category = "llm"


# Numeric kernel

class EmptySpan(NegrankError, ValueError):
    category = "numeric"


class NoOutsideClips(NegrankError, ValueError):
    category = "numeric"


class LengthMismatch(NegrankError, ValueError):
    category = "numeric"


class DegenerateSpan(NegrankError, ValueError):
    category = "numeric"


class NonFiniteTerm(NegrankError, ArithmeticError):
    category = "numeric"


class EmptyMatrix(NegrankError, ValueError):
    category = "numeric"


class ShapeMismatch(NegrankError, ValueError):
    category = "numeric"


class UnknownToken(NegrankError, KeyError):
    category = "data"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown token"


class NonFiniteGradient(NegrankError, ArithmeticError):
    category = "numeric"


class DivergedLoss(NegrankError, ArithmeticError):
    category = "training"

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# Synthesis / evaluation

class InsufficientVocab(NegrankError, ValueError):
    category = "config"


class BadWeights(NegrankError, ValueError):
    pass


class EmptyPredictions(NegrankError, ValueError):
    pass


class MissingTrack(NegrankError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing track"


class EmptyGrid(NegrankError, ValueError):
    category = "config"


# CLI

class UsageError(NegrankError, ValueError):
    category = "usage"


class UnknownSubcommand(UsageError):
    pass


class ConfigError(NegrankError, ValueError):
    category = "config"

    def __init__(self, key: str, reason: str = ""):
        super().__init__(f"{key}: {reason}" if reason else key)
        self.key = key
