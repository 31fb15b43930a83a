"""Exception hierarchy.

Every failure a caller is expected to handle derives from DstackError, so
scenario scripts can match on the class name alone.
"""


class DstackError(Exception):
    pass


# -- crypto ------------------------------------------------------------------

class CryptoError(DstackError):
    pass


class ParameterError(DstackError, ValueError):
    pass


class UnknownPurposeError(CryptoError):
    pass


class InsufficientSharesError(CryptoError):
    pass


class DuplicateIndexError(CryptoError):
    pass


class RefreshError(CryptoError):
    pass


class DecryptError(CryptoError):
    pass


# -- attestation -------------------------------------------------------------

class AttestationError(DstackError):
    pass


class RegisterError(AttestationError):
    pass


class SpoofedQuoteError(AttestationError):
    pass


class OutdatedFirmwareError(AttestationError):
    pass


class MalformedQuoteError(AttestationError):
    pass


class NotBootedError(AttestationError):
    pass


# -- governance --------------------------------------------------------------

class GovernanceError(DstackError):
    pass


class GenesisError(GovernanceError):
    pass


class DuplicateAppError(GovernanceError):
    pass


class UnknownAppError(GovernanceError):
    pass


class UnauthorizedError(GovernanceError):
    pass


class BadSignatureError(GovernanceError):
    pass


class UnknownProposalError(GovernanceError):
    pass


class RootAlreadySetError(GovernanceError):
    pass


# -- kms ---------------------------------------------------------------------

class KmsError(DstackError):
    pass


class AdmissionError(KmsError):
    pass


class UntrustedOSError(KmsError):
    pass


class KeyReleaseDeniedError(KmsError):
    pass


class InstanceNotAuthorizedError(KmsError):
    pass


class EpochExpiredError(KmsError):
    pass


class RotationError(KmsError):
    pass


class QuorumUnavailableError(RotationError):
    pass


# -- certificates / gateway --------------------------------------------------

class GatewayError(DstackError):
    pass


class ChainError(GatewayError):
    pass


class ForeignRootError(ChainError):
    pass


class CertExpiredError(ChainError):
    pass


class NoRouteError(GatewayError):
    pass


class ZoneError(GatewayError):
    pass


class CaaDeniedError(GatewayError):
    pass


class AppRejectedError(GatewayError):
    pass


# -- sealed storage ----------------------------------------------------------

class StorageError(DstackError):
    pass


class VolumeFormatError(StorageError):
    pass


class RollbackDetectedError(StorageError):
    pass


class CounterUnavailableError(StorageError):
    pass


class UnrecoverableError(StorageError):
    pass


# -- harness -----------------------------------------------------------------

class DeliveryError(DstackError):
    pass


class ScenarioError(DstackError):
    pass


class AuditParseError(DstackError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
