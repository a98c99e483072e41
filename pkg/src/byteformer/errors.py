"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class ByteformerError(Exception):
    """Base class for all package errors."""


class ShapeError(ByteformerError):
    """Tensor shapes are incompatible with the requested operation."""


class SequenceTooShortError(ByteformerError):
    """A byte/token sequence is shorter than the reduction kernel."""

    def __init__(self, length, kernel):
        super().__init__(f"sequence length {length} is shorter than kernel size {kernel}")
        self.length = length
        self.kernel = kernel


class ConfigError(ByteformerError):
    """Invalid or inconsistent configuration."""


class DataError(ByteformerError):
    """Bad input data: unreadable files, malformed manifests, undecodable samples."""


class EncodeError(ByteformerError):
    """Input cannot be represented in the requested file encoding."""


class NumericError(ByteformerError):
    """Non-finite values encountered during computation."""
