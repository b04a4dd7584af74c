"""Exception types shared across the package."""


class FedkitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedkitError):
    """Tensor/layer shape arithmetic is inconsistent."""


class InputError(FedkitError):
    """Caller passed semantically invalid data (e.g. label out of range)."""


class ConfigError(FedkitError):
    """Invalid configuration value or combination."""


class StateError(FedkitError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class PrecisionError(FedkitError):
    """Operation requires a double-precision network."""


class IncompatibleWeightsError(FedkitError):
    """Weight collection does not match the target network."""


class AggregationError(FedkitError):
    """Client updates cannot be aggregated."""


class ProtocolError(FedkitError):
    """Wire protocol violation."""


class FramingError(ProtocolError):
    """Bad magic, truncated frame, or length mismatch."""


class CorruptionError(ProtocolError):
    """Checksum mismatch on a received payload."""


class TransportError(FedkitError):
    """Client dispatch failed (connection loss, timeout, client abort)."""
