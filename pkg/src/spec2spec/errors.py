"""Exception types shared across the toolkit."""


class Spec2SpecError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(Spec2SpecError):
    """A caller-supplied value violates a precondition."""


class InvalidState(Spec2SpecError):
    """An operation was invoked on an object in the wrong state."""


class NumericError(Spec2SpecError):
    """A numeric computation produced non-finite values."""


class FormatError(Spec2SpecError):
    """A file does not conform to its declared byte layout."""


class UnsupportedEncoding(FormatError):
    """A WAV file uses an encoding other than mono PCM-16."""


class TruncatedPayload(FormatError):
    """A container entry ends before its declared payload length."""
