"""Exception taxonomy shared across the package."""


class DarkhorseError(Exception):
    """Base class for all protocol and simulator errors."""


class ConfigError(DarkhorseError):
    """Bad or missing configuration."""


class AllocationError(DarkhorseError):
    """Temporary address pool exhausted."""


class InsufficientRelaysError(DarkhorseError):
    """Relay pool too small for the requested topology."""


class CircuitBuildError(DarkhorseError):
    """Telescoping circuit construction failed.

    ``hop_index`` is the 1-based hop that could not be extended.
    """

    def __init__(self, hop_index: int, msg: str = ""):
        self.hop_index = hop_index
        super().__init__(msg or f"circuit build failed at hop {hop_index}")


class HopFailure(DarkhorseError):
    """A reliable hop gave up after exhausting retries on one segment."""


class ChannelError(DarkhorseError):
    """Control or data channel is unusable."""


class DuplicateBindingError(DarkhorseError):
    """A temporary source address was bound twice in one session."""


class IntegrityError(DarkhorseError):
    """AEAD tag verification failed."""


class NonceReuseError(DarkhorseError):
    """A sequence number was reused for end-to-end encryption."""


class IncompleteTransferError(DarkhorseError):
    """Reassembly attempted before all packets arrived."""


class SimulationTimeout(DarkhorseError):
    """The event loop ran past its virtual-time deadline."""
