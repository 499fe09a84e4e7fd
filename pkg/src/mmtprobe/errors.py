"""Exception hierarchy shared by all mmtprobe modules.

Everything raised on a domain-level failure derives from MmtError so the
CLI can map it to exit code 1; programming errors (plain ValueError,
IndexError from user data, ...) are not caught there.
"""


class MmtError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(MmtError):
    """Operand shapes are incompatible; the message names both shapes."""


class ContractError(MmtError):
    """A documented precondition of an operation was violated."""


class TapeError(MmtError):
    """Gradient tape misused (backward twice, backward without tape, ...)."""


class ConfigError(MmtError):
    """Invalid or inconsistent configuration."""


class FormatError(MmtError):
    """A binary or text artifact failed validation.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorpusError(MmtError):
    """Corpus file unreadable or malformed; names the offending line."""


class GenerationError(MmtError):
    """Synthetic feature generation failed (e.g. unplantable word)."""


class CheckpointError(MmtError):
    """Checkpoints disagree on configuration or fail to load."""


class AlignmentError(MmtError):
    """Two parallel artifacts (hypotheses/sidecar/references) disagree in length."""


class DivergenceError(MmtError):
    """Training loss became non-finite; carries the step number."""

    def __init__(self, step: int):
        super().__init__(f"training diverged: non-finite loss at step {step}")
        self.step = step
