"""Trust anchors, envelope verification, KRL merging and key rotation.

Anchors are read exactly once, through descriptors opened while elevated,
and kept in memory. Nothing in this module ever opens a path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import (BadSignatureError, CorruptAnchorError, FingerprintMismatchError,
                     ManifestError, RevokedSignerError, RotationRejectedError, StaleKrlError,
                     UntrustedAnchorError)
from .handles import ObjectHandle, read_all
from .keys import (Fingerprint, KrlDocument, PublicKeyDoc, RotationRequest, fingerprint,
                   rotation_message)
from .manifest import Manifest, SignedEnvelope, parse_manifest

ACCEPT = "accept"
REVOKED = "revoked"


@dataclass(frozen=True)
class AnchorSource:
    """Owner/mode/identity of an anchor file, as seen through its handle at load."""

    path: str
    owner: int
    group: int
    mode: int
    dev: int
    ino: int

    @classmethod
    def of(cls, handle: ObjectHandle) -> "AnchorSource":
        return cls(handle.path, handle.owner, handle.group, handle.mode, handle.dev, handle.ino)


@dataclass(frozen=True)
class TrustAnchors:
    key: PublicKeyDoc
    krl: KrlDocument
    key_source: Optional[AnchorSource] = None
    krl_source: Optional[AnchorSource] = None

    @property
    def fingerprint(self) -> Fingerprint:
        return fingerprint(self.key)


def _require_root_owned(handle: ObjectHandle) -> None:
    if handle.owner != 0:
        raise UntrustedAnchorError(f"{handle.path} is owned by uid {handle.owner}, not root",
                                   path=handle.path)
    if handle.mode & 0o022:
        raise UntrustedAnchorError(f"{handle.path} is group/other writable ({handle.mode:04o})",
                                   path=handle.path)


def load_anchors(key_handle: ObjectHandle,
                 krl_handle: Optional[ObjectHandle] = None) -> TrustAnchors:
    """Validate anchor handles and read the key and KRL through them.

    A missing KRL (``krl_handle is None``) is an empty list at sequence 0.
    """
    _require_root_owned(key_handle)
    if krl_handle is not None:
        _require_root_owned(krl_handle)
    try:
        key = PublicKeyDoc.from_bytes(read_all(key_handle))
    except ManifestError as exc:
        raise CorruptAnchorError(f"public key unreadable: {exc}", path=key_handle.path) from exc
    krl = KrlDocument()
    if krl_handle is not None:
        try:
            krl = KrlDocument.from_bytes(read_all(krl_handle))
        except ManifestError as exc:
            raise CorruptAnchorError(f"KRL unreadable: {exc}", path=krl_handle.path) from exc
    return TrustAnchors(key, krl, AnchorSource.of(key_handle),
                        AnchorSource.of(krl_handle) if krl_handle is not None else None)


def check_revocation(fp: Fingerprint, anchors: TrustAnchors) -> str:
    return REVOKED if fp in anchors.krl.revoked else ACCEPT


def verify_envelope(env: SignedEnvelope, anchors: TrustAnchors) -> Manifest:
    """Authenticate the envelope under the in-memory key, then parse its payload."""
    if check_revocation(env.signer_fingerprint, anchors) == REVOKED:
        raise RevokedSignerError(f"signer {env.signer_fingerprint} is revoked",
                                 fingerprint=env.signer_fingerprint.hex)
    trusted = anchors.fingerprint
    if env.signer_fingerprint != trusted:
        raise FingerprintMismatchError(
            f"envelope signed by {env.signer_fingerprint}, trusted key is {trusted}",
            signer=env.signer_fingerprint.hex, trusted=trusted.hex)
    if env.algorithm_id != anchors.key.algorithm_id:
        raise BadSignatureError(f"algorithm {env.algorithm_id} does not match trusted key")
    if not anchors.key.verify(env.signature, env.payload):
        raise BadSignatureError("signature does not verify under the trusted key")
    return parse_manifest(env.payload)


def verify_rotation(req: RotationRequest, anchors: TrustAnchors) -> PublicKeyDoc:
    """Return the key to install.

    The authorization must verify under the current key even when the new
    key equals it (a no-op), so an authorization issued by an earlier key
    can never be replayed.
    """
    if not anchors.key.verify(req.authorization, rotation_message(req.new_key)):
        raise RotationRejectedError("rotation is not authorized by the currently trusted key",
                                    new_key=fingerprint(req.new_key).hex)
    return req.new_key


def merge_krl(current: KrlDocument, update: KrlDocument) -> KrlDocument:
    if update.sequence_number <= current.sequence_number:
        raise StaleKrlError(f"KRL sequence {update.sequence_number} is not newer than "
                            f"{current.sequence_number}",
                            current=current.sequence_number, update=update.sequence_number)
    return KrlDocument(update.sequence_number, current.revoked | update.revoked)
