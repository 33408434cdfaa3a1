"""Exception hierarchy shared by all pipeline stages.

Every error carries a short machine-readable ``code`` and a ``context`` dict
so the CLI can emit single-line structured diagnostics.
"""

from __future__ import annotations


class LoomError(Exception):
    """Base class for all pipeline errors."""

    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""


class ConfigError(LoomError):
    code = "config"


class CliUsageError(LoomError):
    code = "usage"


class ShapeError(LoomError):
    """Input tensor dimensions do not match the configured contract."""

    code = "shape"


class NumericError(LoomError):
    """Non-finite values where finite ones are required."""

    code = "non_finite"


class TokenRangeError(LoomError):
    """A token id falls outside its declared range."""

    code = "token_range"


class TokenizeError(LoomError):
    code = "tokenize"


class GrammarError(LoomError):
    """A token sequence violates the interleaved image-text grammar."""

    code = "grammar"

    def __init__(self, message: str, position: int, **context):
        super().__init__(message, position=position, **context)
        self.position = position


class EmptyLossError(LoomError):
    """Loss requested over a mask with no true positions."""

    code = "empty_loss"


class DivergenceError(LoomError):
    """Training produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message: str, step: int, learning_rate: float, **context):
        super().__init__(message, step=step, learning_rate=learning_rate, **context)
        self.step = step
        self.learning_rate = learning_rate


class PromptTooLongError(LoomError):
    code = "prompt_too_long"


class DecodeStuckError(LoomError):
    """No token is allowed in the current decoder state (unreachable by construction)."""

    code = "decode_stuck"


class ManifestError(LoomError):
    """A dataset manifest record is malformed or references a bad file."""

    code = "manifest"

    def __init__(self, message: str, line: int, **context):
        super().__init__(message, line=line, **context)
        self.line = line


class CheckpointError(LoomError):
    code = "checkpoint"


class VersionError(CheckpointError):
    code = "version"


class TruncatedFileError(CheckpointError):
    code = "truncated"


class ChecksumError(CheckpointError):
    code = "checksum"


class SectionMissingError(CheckpointError):
    code = "missing_section"

    def __init__(self, message: str, section: str, **context):
        super().__init__(message, section=section, **context)
        self.section = section
