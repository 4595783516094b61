"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems -> 2, data problems -> 3,
numeric failures -> 4.
"""


class AlignsumError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AlignsumError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(AlignsumError, ValueError):
    """Tensor or array shapes are inconsistent with the operation."""


class NumericDomainError(AlignsumError, ArithmeticError):
    """A value left the numeric domain an operation is defined on."""


class FormatError(AlignsumError, ValueError):
    """Structured input (sequence, file, record) is malformed."""


class VocabularyError(AlignsumError, ValueError):
    """A token id falls outside the vocabulary."""


class CheckInvalidError(AlignsumError, RuntimeError):
    """A gradient check could not be carried out (e.g. non-deterministic op)."""


class IntegrityError(AlignsumError, RuntimeError):
    """A persisted artifact failed its checksum or structural validation."""


class CapacityError(AlignsumError, ValueError):
    """A request exceeds the generator's enumerable space."""


class RecordParseError(FormatError):
    """A dataset record failed to parse; carries location context."""

    def __init__(self, message, line=None, record_id=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if record_id is not None:
            loc.append(f"record {record_id}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.record_id = record_id


class ConfigError(AlignsumError, ValueError):
    """A configuration file or override could not be applied."""
