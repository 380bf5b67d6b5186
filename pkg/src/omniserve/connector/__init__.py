"""Inter-stage transport: keyed put/get and ordered streams over INPROC, SHM or TCP."""

from .connector import (
    Connector,
    ConnectorKey,
    StreamReceiver,
    StreamSender,
    TransportConfig,
)
from .errors import (
    AlreadyOpen,
    Backpressure,
    ConnectorError,
    ConnectorTimeout,
    KeyConsumed,
    MissingKey,
    PortInUse,
    ProtocolViolation,
    RegionFull,
    TransportDown,
    WriteConflict,
)
from .wire import ControlMessage, HeapRef, Inline, MessageKind, ShmRef, TcpRef

__all__ = [
    "AlreadyOpen",
    "Backpressure",
    "Connector",
    "ConnectorError",
    "ConnectorKey",
    "ConnectorTimeout",
    "ControlMessage",
    "HeapRef",
    "Inline",
    "KeyConsumed",
    "MessageKind",
    "MissingKey",
    "PortInUse",
    "ProtocolViolation",
    "RegionFull",
    "ShmRef",
    "StreamReceiver",
    "StreamSender",
    "TcpRef",
    "TransportConfig",
    "TransportDown",
    "WriteConflict",
]
