"""Exception types shared across the package."""

from __future__ import annotations


class BbsError(Exception):
    """Base class for every error raised by this package."""


class EncodingError(BbsError):
    """Value cannot be canonically encoded or decoded."""


class ConfigError(BbsError):
    """Malformed genesis or plan file."""


class UnknownOrg(BbsError):
    """Organization is not part of the consortium."""


class AccessDenied(BbsError):
    """Caller identity is not admitted by the consortium registry."""


class DuplicateIdentity(BbsError):
    """Identity with the same rendered id already registered."""


class ChainMismatch(BbsError):
    """Block does not extend the chain tip."""


class ChainCorrupt(BbsError):
    """Persisted or received chain fails verification."""


class MismatchedEndorsements(BbsError):
    """Endorsement responses disagree on the execution result."""


class PolicyParseError(BbsError):
    """Endorsement policy expression is malformed."""


# --- contract-level errors ---------------------------------------------------
# Raised during endorsement; they abort the proposal and no rwset is produced.


class ContractError(BbsError):
    code = "ContractError"


class UnknownFile(ContractError):
    code = "UnknownFile"


class DuplicateID(ContractError):
    code = "DuplicateID"


class FileMissing(ContractError):
    code = "FileMissing"


class NotOwner(ContractError):
    code = "NotOwner"


class UnknownEvent(ContractError):
    code = "UnknownEvent"


class WrongPhase(ContractError):
    code = "WrongPhase"


class FlagFalse(ContractError):
    code = "FlagFalse"


class NotReceiver(ContractError):
    code = "NotReceiver"


class TransferFailed(ContractError):
    code = "TransferFailed"


class KeyMissing(ContractError):
    code = "KeyMissing"


class PolicyGuardError(ContractError):
    """Randomized contract function resolved to a multi-org policy."""

    code = "PolicyGuardError"


# HashMismatch is special: the failure is recorded on the ledger as dispute
# evidence, so it travels in the execution result instead of aborting it.
HASH_MISMATCH = "HashMismatch"


# --- private data ------------------------------------------------------------


class NotAMember(BbsError):
    """Peer's org is not in the collection membership."""


class NotFound(BbsError):
    """Private value is not (yet) held by this peer."""


# --- off-state ---------------------------------------------------------------


class OffStateError(BbsError):
    pass


class AuthFailed(OffStateError):
    """Authenticated decryption failed (wrong key or corrupted bytes)."""


class IntegrityMismatch(OffStateError):
    """Received bytes do not hash to the digest announced in the header."""


class Interrupted(OffStateError):
    """Transfer aborted before the terminal digest frame."""


# --- network -----------------------------------------------------------------


class Unreachable(BbsError):
    """Destination node cannot be reached (partition or dead address)."""


class ConnectFailed(Unreachable):
    pass


class RequestTimeout(BbsError):
    """No response arrived within the deadline."""


class InvokeFailed(BbsError):
    """A transaction invocation failed before ordering; carries the peer's code."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code
        self.detail = message


class QueryFailed(BbsError):
    """A peer refused or failed a read-only query."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code
        self.detail = message


class ShuttingDown(BbsError):
    """Runtime is stopping; blocking operations are cancelled."""
