"""Public-key documents, fingerprints, KRL and rotation documents.

These are the wire types shared by the host-side trust store and the
vendor toolchain. Signature verification lives here too so that both sides
agree on exactly what bytes are signed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa

from .canonical import (b64decode_strict, b64encode, canonical_json, expect_int,
                        expect_keys, is_lower_hex, load_json_strict)
from .errors import NonCanonicalError, SchemaError, UnsupportedAlgorithmError

ED25519 = "ed25519"
RSA2048_SHA256 = "rsa2048-sha256"
SUPPORTED_ALGORITHMS = frozenset({ED25519, RSA2048_SHA256})

ROTATION_CONTEXT = b"key-rotation:v1"


def require_supported(algorithm_id: Any) -> str:
    if algorithm_id not in SUPPORTED_ALGORITHMS:
        raise UnsupportedAlgorithmError(f"unsupported algorithm {algorithm_id!r}",
                                        algorithm_id=str(algorithm_id))
    return algorithm_id


@dataclass(frozen=True, order=True)
class Fingerprint:
    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise SchemaError("fingerprint must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: Any) -> "Fingerprint":
        if not is_lower_hex(text, 64):
            raise SchemaError(f"malformed fingerprint {text!r}")
        return cls(bytes.fromhex(text))

    def __str__(self) -> str:
        return self.hex


@dataclass(frozen=True)
class PublicKeyDoc:
    algorithm_id: str
    key_bytes: bytes

    def __post_init__(self):
        require_supported(self.algorithm_id)
        # Parsing doubles as the canonical-encoding check.
        self.public_key()

    def public_key(self):
        if self.algorithm_id == ED25519:
            if len(self.key_bytes) != 32:
                raise SchemaError("ed25519 key must be 32 raw bytes")
            try:
                return ed25519.Ed25519PublicKey.from_public_bytes(self.key_bytes)
            except ValueError as exc:
                raise SchemaError(f"invalid ed25519 key: {exc}") from exc
        try:
            key = serialization.load_der_public_key(self.key_bytes)
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"invalid RSA key: {exc}") from exc
        if not isinstance(key, rsa.RSAPublicKey) or key.key_size != 2048:
            raise SchemaError("expected a 2048-bit RSA public key")
        der = key.public_bytes(serialization.Encoding.DER,
                               serialization.PublicFormat.SubjectPublicKeyInfo)
        if der != self.key_bytes:
            raise NonCanonicalError("RSA key is not in canonical DER form")
        return key

    def verify(self, signature: bytes, message: bytes) -> bool:
        key = self.public_key()
        try:
            if self.algorithm_id == ED25519:
                key.verify(signature, message)
            else:
                key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
        except InvalidSignature:
            return False
        return True

    def to_obj(self) -> dict:
        return {"algorithm_id": self.algorithm_id, "key_bytes": b64encode(self.key_bytes)}

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_obj())

    @classmethod
    def from_obj(cls, obj: Any) -> "PublicKeyDoc":
        expect_keys(obj, {"algorithm_id", "key_bytes"}, what="public key")
        require_supported(obj["algorithm_id"])
        return cls(obj["algorithm_id"], b64decode_strict(obj["key_bytes"], "key_bytes"))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PublicKeyDoc":
        """Parse a key file; the bytes must already be in canonical form."""
        doc = cls.from_obj(load_json_strict(raw))
        if doc.canonical_bytes() != raw:
            raise NonCanonicalError("key document is not canonical")
        return doc


def fingerprint(key: PublicKeyDoc) -> Fingerprint:
    return Fingerprint(hashlib.sha256(key.canonical_bytes()).digest())


@dataclass(frozen=True)
class KrlDocument:
    sequence_number: int = 0
    revoked: frozenset[Fingerprint] = field(default_factory=frozenset)

    def __post_init__(self):
        expect_int(self.sequence_number, "sequence_number")
        object.__setattr__(self, "revoked", frozenset(self.revoked))

    def to_obj(self) -> dict:
        return {"revoked": sorted(fp.hex for fp in self.revoked),
                "sequence_number": self.sequence_number}

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_obj())

    @classmethod
    def from_obj(cls, obj: Any) -> "KrlDocument":
        expect_keys(obj, {"revoked", "sequence_number"}, what="KRL")
        if not isinstance(obj["revoked"], list):
            raise SchemaError("KRL revoked must be a list")
        return cls(expect_int(obj["sequence_number"], "sequence_number"),
                   frozenset(Fingerprint.from_hex(h) for h in obj["revoked"]))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KrlDocument":
        # Ordering and duplicates are tolerated in the file; set semantics apply.
        return cls.from_obj(load_json_strict(raw))


def rotation_message(new_key: PublicKeyDoc) -> bytes:
    return ROTATION_CONTEXT + new_key.canonical_bytes()


@dataclass(frozen=True)
class RotationRequest:
    new_key: PublicKeyDoc
    authorization: bytes

    def to_obj(self) -> dict:
        return {"authorization": b64encode(self.authorization), "new_key": self.new_key.to_obj()}

    @classmethod
    def from_obj(cls, obj: Any) -> "RotationRequest":
        expect_keys(obj, {"authorization", "new_key"}, what="rotation")
        return cls(PublicKeyDoc.from_obj(obj["new_key"]),
                   b64decode_strict(obj["authorization"], "authorization"))


# -- private keys (vendor side) ---------------------------------------------

def generate_private_key(algorithm_id: str):
    require_supported(algorithm_id)
    if algorithm_id == ED25519:
        return ed25519.Ed25519PrivateKey.generate()
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


def algorithm_of(private_key) -> str:
    if isinstance(private_key, ed25519.Ed25519PrivateKey):
        return ED25519
    if isinstance(private_key, rsa.RSAPrivateKey) and private_key.key_size == 2048:
        return RSA2048_SHA256
    raise UnsupportedAlgorithmError("unsupported private key type")


def public_doc(private_key) -> PublicKeyDoc:
    algorithm_id = algorithm_of(private_key)
    pub = private_key.public_key()
    if algorithm_id == ED25519:
        raw = pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    else:
        raw = pub.public_bytes(serialization.Encoding.DER,
                               serialization.PublicFormat.SubjectPublicKeyInfo)
    return PublicKeyDoc(algorithm_id, raw)


def sign_bytes(private_key, message: bytes) -> bytes:
    if algorithm_of(private_key) == ED25519:
        return private_key.sign(message)
    return private_key.sign(message, padding.PKCS1v15(), hashes.SHA256())


def private_key_to_pem(private_key) -> bytes:
    return private_key.private_bytes(serialization.Encoding.PEM,
                                     serialization.PrivateFormat.PKCS8,
                                     serialization.NoEncryption())


def private_key_from_pem(data: bytes):
    key = serialization.load_pem_private_key(data, password=None)
    algorithm_of(key)
    return key


def fingerprints_from_hex(values: Iterable[str]) -> frozenset[Fingerprint]:
    return frozenset(Fingerprint.from_hex(v) for v in values)
