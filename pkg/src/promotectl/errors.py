"""Exception hierarchy and process exit codes.

Every error carries a short machine-readable ``code`` that ends up in the
audit log and the JSON run report, plus a default ``exit_code``. The engine
may override the exit code based on the stage in which a generic handle
error surfaced (a symlink is an anchor failure during setup but a candidate
failure during validation).
"""
from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ANCHOR = 10
EXIT_REVOKED = 11
EXIT_SIGNATURE = 12
EXIT_DIGEST = 13
EXIT_POLICY = 14
EXIT_TRUST_UPDATE = 15
EXIT_PROMOTION = 16
EXIT_LOCK = 17
EXIT_CONTRACT = 18


class PromoteError(Exception):
    code = "error"
    exit_code = EXIT_PROMOTION

    def __init__(self, message: str = "", **detail):
        super().__init__(message or self.code)
        self.detail = detail


# -- manifest / envelope -----------------------------------------------------

class ManifestError(PromoteError):
    code = "manifest-invalid"
    exit_code = EXIT_SIGNATURE


class EncodingError(ManifestError):
    code = "encoding-error"


class MalformedEnvelopeError(ManifestError):
    code = "malformed-envelope"


class UnsupportedAlgorithmError(ManifestError):
    code = "unsupported-algorithm"


class SchemaError(ManifestError):
    code = "schema-violation"


class NonCanonicalError(ManifestError):
    code = "non-canonical"


class DuplicateDestinationError(ManifestError):
    code = "duplicate-destination"


class MultipleEnablerError(ManifestError):
    code = "multiple-enabler"


class PathTraversalError(ManifestError):
    code = "path-traversal"


class EmptyGrantError(ManifestError):
    code = "empty-grant"


# -- trust anchors / signatures ---------------------------------------------

class AnchorError(PromoteError):
    code = "anchor-error"
    exit_code = EXIT_ANCHOR


class UntrustedAnchorError(AnchorError):
    code = "untrusted-anchor"


class CorruptAnchorError(AnchorError):
    code = "corrupt-anchor"


class RevokedSignerError(PromoteError):
    code = "revoked-signer"
    exit_code = EXIT_REVOKED


class SignatureError(PromoteError):
    code = "signature-failure"
    exit_code = EXIT_SIGNATURE


class BadSignatureError(SignatureError):
    code = "bad-signature"


class FingerprintMismatchError(SignatureError):
    code = "fingerprint-mismatch"


class TrustUpdateError(PromoteError):
    code = "trust-update-failure"
    exit_code = EXIT_TRUST_UPDATE


class StaleKrlError(TrustUpdateError):
    code = "stale-krl"


class RotationRejectedError(TrustUpdateError):
    code = "rotation-rejected"


class KeyMismatchError(PromoteError):
    """Vendor side: a private key does not belong to the expected public key."""

    code = "key-mismatch"
    exit_code = 1


# -- filesystem handles ------------------------------------------------------

class HandleError(PromoteError):
    code = "handle-error"
    exit_code = EXIT_DIGEST


class MissingFileError(HandleError):
    code = "missing-file"


class SymlinkRejectedError(HandleError):
    code = "symlink-rejected"


class NotRegularFileError(HandleError):
    code = "not-regular-file"


class ReadFailureError(HandleError):
    code = "read-failure"


class OversizeError(CorruptAnchorError):
    code = "oversize"


class PrivilegeInsufficientError(HandleError):
    code = "privilege-insufficient"
    exit_code = EXIT_PROMOTION


class StagingLocationError(HandleError):
    code = "staging-location"
    exit_code = EXIT_PROMOTION


class UnsupportedCapabilityError(HandleError):
    code = "unsupported-capability"
    exit_code = EXIT_PROMOTION


class DiskFullError(HandleError):
    code = "disk-full"
    exit_code = EXIT_PROMOTION


# -- engine ------------------------------------------------------------------

class DigestMismatchError(PromoteError):
    code = "digest-mismatch"
    exit_code = EXIT_DIGEST


class PolicyViolationError(PromoteError):
    code = "policy-violation"
    exit_code = EXIT_POLICY


class PromotionError(PromoteError):
    code = "promotion-failure"
    exit_code = EXIT_PROMOTION


class LockContentionError(PromoteError):
    code = "lock-contention"
    exit_code = EXIT_LOCK


class ContractViolation(PromoteError):
    code = "contract-violation"
    exit_code = EXIT_CONTRACT


class NotElevatedError(ContractViolation):
    code = "not-elevated"


class MarkerMismatchError(ContractViolation):
    code = "marker-mismatch"


class InjectedFailure(PromoteError):
    """Raised by test instrumentation hooks to simulate an ordinary failure."""

    code = "injected-failure"


class EngineKilled(BaseException):
    """Raised by test instrumentation hooks to simulate abrupt process death.

    Derives from BaseException so that no cleanup handler in the engine
    swallows it: staged files are left exactly as a SIGKILL would leave them.
    """
