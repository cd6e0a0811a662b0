"""
Exception hierarchy for skinssl.

Every error carries a stable ``code`` string so the CLI and artifact readers
can tell failure kinds apart without parsing messages.
"""


class SkinSSLError(Exception):
    """Base class for all skinssl errors."""

    code = "skinssl-error"


class InvalidInputError(SkinSSLError, ValueError):
    """Shapes, dimensions or orderings that violate an operation's contract."""

    code = "invalid-input"


class InsufficientDataError(SkinSSLError, ValueError):
    """Too few frames, windows or episodes to do the requested work."""

    code = "insufficient-data"


class NumericError(SkinSSLError, ArithmeticError):
    """A non-finite value reached a place that requires finite numbers."""

    code = "numeric"


class MissingFileError(SkinSSLError, FileNotFoundError):
    code = "missing-file"


class ChecksumMismatchError(SkinSSLError):
    code = "checksum-mismatch"


class VersionMismatchError(SkinSSLError):
    code = "version-mismatch"


class DegenerateLabelsError(SkinSSLError, ValueError):
    code = "degenerate-labels"


class SchemaError(SkinSSLError, ValueError):
    """A table or file is missing columns/fields it must have."""

    code = "schema"


class ConfigError(SkinSSLError, ValueError):
    code = "config"


class ResumeError(SkinSSLError):
    """A checkpoint could not be restored; ``tensor`` names the culprit."""

    code = "resume"

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor
