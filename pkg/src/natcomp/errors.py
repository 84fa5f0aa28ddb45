"""Exception hierarchy shared by all modules."""


class NatCompError(Exception):
    """Base class for package errors."""


class InvalidInputError(NatCompError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ConfigurationError(NatCompError, ValueError):
    """Compressor spec, problem or run configuration is inconsistent."""


class EncodeError(NatCompError, ValueError):
    """A value cannot be represented in the requested wire format."""


class FormatError(NatCompError, ValueError):
    """A byte block is malformed, truncated or of an unknown codec."""


class UnboundedSecondMomentError(NatCompError, ValueError):
    """The operator has no finite second-moment parameter."""


class DivergenceError(NatCompError, RuntimeError):
    """An SGD run left the divergence guard."""


class SessionError(NatCompError, RuntimeError):
    """An aggregation session was aborted (timeout or lost worker)."""


class ProtocolError(NatCompError, ValueError):
    """Peers disagree on the aggregation wire protocol."""


class FloatUsageError(NatCompError, TypeError):
    """Floating-point data reached the integer-only aggregation path."""
