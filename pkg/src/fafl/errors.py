"""Exception hierarchy shared by every subsystem.

Each class carries a short machine-greppable ``code`` used by the CLI when it
prints a failure line.
"""

from __future__ import annotations


class FaflError(Exception):
    code = "FAFL-E-RUNTIME"


class ConfigError(FaflError, ValueError):
    """Invalid configuration; ``field`` names the offending (dotted) key when known."""

    code = "FAFL-E-CONFIG"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class TrainingError(FaflError):
    code = "FAFL-E-TRAIN"


class EvaluationError(FaflError):
    code = "FAFL-E-EVAL"


class PartitionError(FaflError):
    code = "FAFL-E-PARTITION"


class IngestionError(FaflError):
    code = "FAFL-E-INGEST"


class AggregationError(FaflError):
    code = "FAFL-E-AGGREGATE"


class ChannelError(FaflError):
    code = "FAFL-E-CHANNEL"


class FrameError(ChannelError):
    code = "FAFL-E-FRAME"


class AuthenticationError(ChannelError):
    code = "FAFL-E-AUTH"


class CodecError(ChannelError):
    code = "FAFL-E-CODEC"


class ReportError(FaflError):
    code = "FAFL-E-REPORT"
