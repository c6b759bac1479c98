"""Manifest and signed-envelope data model.

A manifest lists the promotions a vendor authorizes. It travels inside a
signed envelope whose payload is the canonical JSON encoding of the
manifest; the host never accepts a payload that is not byte-for-byte
canonical, so any re-encoding of signed content is treated as forgery.
"""
from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass
from typing import Any, Optional

from .canonical import (b64decode_strict, b64encode, canonical_json, expect_int,
                        expect_keys, is_lower_hex, load_json_strict)
from .errors import (DuplicateDestinationError, EmptyGrantError, MalformedEnvelopeError,
                     MultipleEnablerError, NonCanonicalError, PathTraversalError,
                     SchemaError)
from .keys import Fingerprint, KrlDocument, RotationRequest, require_supported

FORMAT_VERSION = 1
ENVELOPE_FILENAME = "manifest.sig.json"
MAX_ID = 2**32 - 2  # (uid_t)-1 is reserved by chown

_CAP_RE = re.compile(r"^[A-Za-z0-9_]+$")


def _check_destination(path: Any) -> str:
    if not isinstance(path, str) or not path:
        raise SchemaError("destination_path must be a non-empty string")
    if "\x00" in path:
        raise SchemaError("destination_path contains NUL")
    if not path.startswith("/"):
        raise SchemaError(f"destination_path {path!r} is not absolute")
    if ".." in path.split("/"):
        raise PathTraversalError(f"destination_path {path!r} contains '..'")
    if path == "/" or path.startswith("//") or posixpath.normpath(path) != path:
        raise SchemaError(f"destination_path {path!r} is not normalized")
    return path


def _check_candidate(path: Any) -> str:
    if not isinstance(path, str) or not path:
        raise SchemaError("candidate_path must be a non-empty string")
    if "\x00" in path:
        raise SchemaError("candidate_path contains NUL")
    if path.startswith("/"):
        raise PathTraversalError(f"candidate_path {path!r} is absolute")
    if ".." in path.split("/"):
        raise PathTraversalError(f"candidate_path {path!r} contains '..'")
    if path == "." or posixpath.normpath(path) != path:
        raise SchemaError(f"candidate_path {path!r} is not normalized")
    return path


@dataclass(frozen=True)
class TargetAttributes:
    owner_id: int
    group_id: int
    mode: int
    capabilities: tuple[str, ...] = ()

    def __post_init__(self):
        expect_int(self.owner_id, "owner_id", hi=MAX_ID)
        expect_int(self.group_id, "group_id", hi=MAX_ID)
        expect_int(self.mode, "mode", hi=0o7777)
        caps = self.capabilities
        if isinstance(caps, str) or not all(isinstance(c, str) for c in caps):
            raise SchemaError("capabilities must be a sequence of strings")
        for cap in caps:
            if not cap.isascii() or not _CAP_RE.match(cap):
                raise SchemaError(f"invalid capability name {cap!r}")
        object.__setattr__(self, "capabilities", tuple(caps))
        if not self.grants_privilege():
            raise EmptyGrantError("entry grants no privilege")

    def grants_privilege(self) -> bool:
        """True if these attributes confer anything an unprivileged account lacks.

        Root ownership (user or group), setuid/setgid bits and file
        capabilities all count; plain non-root ownership with ordinary
        permission bits does not.
        """
        return (self.owner_id == 0 or self.group_id == 0
                or bool(self.mode & 0o6000) or bool(self.capabilities))

    def to_obj(self) -> dict:
        return {"capabilities": list(self.capabilities), "group_id": self.group_id,
                "mode": self.mode, "owner_id": self.owner_id}

    @classmethod
    def from_obj(cls, obj: Any) -> "TargetAttributes":
        expect_keys(obj, {"capabilities", "group_id", "mode", "owner_id"}, what="target")
        if not isinstance(obj["capabilities"], list):
            raise SchemaError("capabilities must be a list")
        return cls(obj["owner_id"], obj["group_id"], obj["mode"], tuple(obj["capabilities"]))


@dataclass(frozen=True)
class ManifestEntry:
    candidate_path: str
    destination_path: str
    target: TargetAttributes
    content_digest: str
    is_enabler: bool = False

    def __post_init__(self):
        _check_candidate(self.candidate_path)
        _check_destination(self.destination_path)
        if not isinstance(self.target, TargetAttributes):
            raise SchemaError("target must be TargetAttributes")
        if not is_lower_hex(self.content_digest, 64):
            raise SchemaError("content_digest must be 64 lowercase hex characters")
        if not isinstance(self.is_enabler, bool):
            raise SchemaError("is_enabler must be a boolean")

    def to_obj(self) -> dict:
        return {"candidate_path": self.candidate_path,
                "content_digest": self.content_digest,
                "destination_path": self.destination_path,
                "is_enabler": self.is_enabler,
                "target": self.target.to_obj()}

    @classmethod
    def from_obj(cls, obj: Any) -> "ManifestEntry":
        expect_keys(obj, {"candidate_path", "content_digest", "destination_path",
                          "is_enabler", "target"}, what="entry")
        return cls(obj["candidate_path"], obj["destination_path"],
                   TargetAttributes.from_obj(obj["target"]),
                   obj["content_digest"], obj["is_enabler"])


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    rotation: Optional[RotationRequest] = None
    krl_update: Optional[KrlDocument] = None
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if isinstance(self.format_version, bool) or self.format_version != FORMAT_VERSION:
            raise SchemaError(f"unsupported format_version {self.format_version!r}")
        seen = set()
        for entry in self.entries:
            if not isinstance(entry, ManifestEntry):
                raise SchemaError("entries must be ManifestEntry values")
            if entry.destination_path in seen:
                raise DuplicateDestinationError(
                    f"duplicate destination {entry.destination_path}",
                    destination=entry.destination_path)
            seen.add(entry.destination_path)
        if sum(1 for e in self.entries if e.is_enabler) > 1:
            raise MultipleEnablerError("more than one entry is marked is_enabler")

    @property
    def enabler_index(self) -> Optional[int]:
        for i, entry in enumerate(self.entries):
            if entry.is_enabler:
                return i
        return None

    def to_obj(self) -> dict:
        obj: dict = {"entries": [e.to_obj() for e in self.entries],
                     "format_version": self.format_version}
        if self.rotation is not None:
            obj["rotation"] = self.rotation.to_obj()
        if self.krl_update is not None:
            obj["krl_update"] = self.krl_update.to_obj()
        return obj

    @classmethod
    def from_obj(cls, obj: Any) -> "Manifest":
        expect_keys(obj, {"entries", "format_version"}, {"rotation", "krl_update"},
                    what="manifest")
        if not isinstance(obj["entries"], list):
            raise SchemaError("entries must be a list")
        rotation = obj.get("rotation")
        krl = obj.get("krl_update")
        return cls(tuple(ManifestEntry.from_obj(e) for e in obj["entries"]),
                   RotationRequest.from_obj(rotation) if rotation is not None else None,
                   KrlDocument.from_obj(krl) if krl is not None else None,
                   obj["format_version"])


def canonicalize(manifest: Manifest) -> bytes:
    return canonical_json(manifest.to_obj())


def parse_manifest(payload: bytes) -> Manifest:
    """Parse an already signature-checked payload.

    The result must re-encode to exactly ``payload``; any other encoding of
    the same logical content is rejected.
    """
    manifest = Manifest.from_obj(load_json_strict(payload))
    if canonicalize(manifest) != payload:
        raise NonCanonicalError("manifest payload is not in canonical form")
    return manifest


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    signature: bytes
    signer_fingerprint: Fingerprint
    algorithm_id: str

    def to_obj(self) -> dict:
        return {"algorithm_id": self.algorithm_id,
                "payload": b64encode(self.payload),
                "signature": b64encode(self.signature),
                "signer_fingerprint": self.signer_fingerprint.hex}

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_obj())


def parse_envelope(raw: bytes) -> SignedEnvelope:
    """Extract envelope fields from untrusted bytes without touching the payload."""
    if not raw:
        raise MalformedEnvelopeError("empty envelope")
    try:
        obj = load_json_strict(raw)
        expect_keys(obj, {"algorithm_id", "payload", "signature", "signer_fingerprint"},
                    what="envelope")
        if not isinstance(obj["algorithm_id"], str):
            raise SchemaError("algorithm_id must be a string")
    except SchemaError as exc:
        raise MalformedEnvelopeError(str(exc)) from exc
    require_supported(obj["algorithm_id"])
    try:
        return SignedEnvelope(b64decode_strict(obj["payload"], "payload"),
                              b64decode_strict(obj["signature"], "signature"),
                              Fingerprint.from_hex(obj["signer_fingerprint"]),
                              obj["algorithm_id"])
    except SchemaError as exc:
        raise MalformedEnvelopeError(str(exc)) from exc
