"""Error types shared across the simulator.

Every operation in the package raises one of these instead of a bare
ValueError/RuntimeError so callers can match on failure class.
"""


class SgxPartError(Exception):
    """Base class for all simulator errors."""


# -- physical memory --------------------------------------------------------

class OutOfMemory(SgxPartError):
    """No contiguous free run of the requested size."""


class InvalidArgument(SgxPartError):
    """Malformed argument (zero-page allocation, oversized payload, ...)."""


class OutOfBounds(SgxPartError):
    """Address range falls outside physical memory."""


# -- enclave lifecycle ------------------------------------------------------

class WrongState(SgxPartError):
    """Operation not permitted in the enclave's current lifecycle state."""


class DuplicatePage(SgxPartError):
    """A page at this offset was already added."""


class OutOfRange(SgxPartError):
    """Page offset lies outside the enclave's reserved range."""


class NoSuchPage(SgxPartError):
    """No page was added at this offset."""


class EmptyEnclave(SgxPartError):
    """Initialization requires at least one measured code page."""


class NoSuchEntryPoint(SgxPartError):
    """The named code unit is not a declared entry point of the enclave."""


class NotInEnclave(SgxPartError):
    """Key and report operations are only available from inside an enclave."""


# -- sealing and attestation ------------------------------------------------

class SealIntegrityFailure(SgxPartError):
    """Sealed blob failed its authenticity check."""


class WrongEnclaveIdentity(SgxPartError):
    """Sealed blob was produced by a different enclave identity."""


class AttestationFailure(SgxPartError):
    """A report exchanged during channel setup did not verify."""


class CrossPlatform(SgxPartError):
    """Both channel endpoints must live on the same platform instance."""


# -- trusted channels -------------------------------------------------------

class IntegrityFailure(SgxPartError):
    """Channel message failed its authentication tag."""


class ReplayDetected(SgxPartError):
    """Channel message counter did not advance."""


class NotEndpoint(SgxPartError):
    """The enclave is not an endpoint of this channel."""


# -- server ------------------------------------------------------------------

class HandshakeFailure(SgxPartError):
    """Key establishment failed (bad key share or bad credentials)."""


class DuplicateConnection(SgxPartError):
    """A session with this connection id is already established."""


class NoSuchSession(SgxPartError):
    """No established session for this connection id."""


class RecordIntegrityFailure(SgxPartError):
    """Application record failed decryption or sequence check."""


# -- planning ----------------------------------------------------------------

class PlanError(SgxPartError):
    """Partition plan is internally inconsistent."""
