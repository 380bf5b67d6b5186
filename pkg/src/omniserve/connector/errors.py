from __future__ import annotations

from ..core import MissingKey, OmniError, WriteConflict

__all__ = [
    "AlreadyOpen",
    "Backpressure",
    "ConnectorError",
    "ConnectorTimeout",
    "KeyConsumed",
    "MissingKey",
    "PortInUse",
    "ProtocolViolation",
    "RegionFull",
    "TransportDown",
    "WriteConflict",
]


class ConnectorError(OmniError):
    pass


class RegionFull(ConnectorError):
    """Shared-memory region has no extent large enough; retry after consumers drain."""


class TransportDown(ConnectorError):
    pass


class PortInUse(ConnectorError):
    pass


class ConnectorTimeout(ConnectorError, TimeoutError):
    pass


class AlreadyOpen(ConnectorError):
    pass


class ProtocolViolation(ConnectorError):
    pass


class Backpressure(ConnectorError):
    """Stream reached its high watermark of unconsumed chunks."""


class KeyConsumed(MissingKey):
    pass
