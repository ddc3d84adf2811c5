"""Error classes shared by the sampler backends."""


class AnnealerError(Exception):
    """Base class for sampler-backend failures."""


class TransportError(AnnealerError):
    """The remote endpoint could not be reached (connection, timeout)."""


class ProtocolError(AnnealerError):
    """The peer spoke the protocol wrong (malformed payload, bad shapes)."""


class VersionMismatchError(ProtocolError):
    """The peer uses an incompatible wire format version."""


class StaleHandleError(AnnealerError):
    """The program handle is closed or unknown to the backend."""
