"""Vendor-side tooling: keys, signed packages, rotation authorizations, KRLs.

Manifest sources are plain JSON written by a release engineer::

    {
      "entries": [
        {"candidate_path": "bin/helper",
         "destination_path": "/opt/app/bin/helper",
         "target": {"owner_id": 0, "group_id": 0, "mode": "4755", "capabilities": []},
         "is_enabler": false}
      ],
      "rotation": "rotation.json",
      "krl_update": "krl.json"
    }

``mode`` may be an integer or an octal string. ``rotation`` and
``krl_update`` are optional and may be inline objects or paths relative to
the source file. Content digests are always recomputed from the candidate
files; any digest in the source is ignored.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import stat
import sys
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .errors import KeyMismatchError, PromoteError, SchemaError
from .keys import (ED25519, SUPPORTED_ALGORITHMS, Fingerprint, KrlDocument, PublicKeyDoc,
                   RotationRequest, fingerprint, generate_private_key, private_key_from_pem,
                   private_key_to_pem, public_doc, require_supported, rotation_message,
                   sign_bytes)
from .manifest import (ENVELOPE_FILENAME, Manifest, ManifestEntry, SignedEnvelope,
                       TargetAttributes, canonicalize, parse_envelope)
from .trust import TrustAnchors, verify_envelope

log = logging.getLogger("promotectl.vendor")

PathLike = Union[str, Path]


def _write_file(path: Path, data: bytes, mode: int) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_NOFOLLOW, mode)
    try:
        os.fchmod(fd, mode)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    os.replace(tmp, path)


def keygen(algorithm_id: str, out_dir: PathLike, name: str = "vendor") -> tuple[Path, Path]:
    """Write ``<name>.key.pem`` (0600) and ``<name>.pubkey.doc`` into ``out_dir``."""
    require_supported(algorithm_id)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    private_key = generate_private_key(algorithm_id)
    priv_path = out / f"{name}.key.pem"
    pub_path = out / f"{name}.pubkey.doc"
    _write_file(priv_path, private_key_to_pem(private_key), 0o600)
    _write_file(pub_path, public_doc(private_key).canonical_bytes(), 0o644)
    return priv_path, pub_path


def load_private_key(path: PathLike):
    return private_key_from_pem(Path(path).read_bytes())


def load_public_doc(path: PathLike) -> PublicKeyDoc:
    return PublicKeyDoc.from_bytes(Path(path).read_bytes())


def file_digest(path: PathLike) -> str:
    """SHA-256 of a candidate file. Symlinks and non-regular files are refused."""
    fd = os.open(path, os.O_RDONLY | os.O_NOFOLLOW | os.O_NONBLOCK)
    with os.fdopen(fd, "rb") as fh:
        if not stat.S_ISREG(os.fstat(fh.fileno()).st_mode):
            raise SchemaError(f"{path} is not a regular file")
        h = hashlib.sha256()
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_mode(value: Any) -> int:
    if isinstance(value, str):
        return int(value, 8)
    return value


def _resolve(value: Any, base: Path) -> Any:
    if isinstance(value, str):
        return json.loads((base / value).read_bytes())
    return value


def build_manifest(package_dir: PathLike, source: dict, base: Optional[PathLike] = None) -> Manifest:
    package = Path(package_dir)
    base_dir = Path(base) if base is not None else package
    entries = []
    for raw in source.get("entries", []):
        target = dict(raw["target"])
        target["mode"] = _parse_mode(target["mode"])
        candidate = raw["candidate_path"]
        path = package / candidate
        if not path.exists() and not path.is_symlink():
            raise SchemaError(f"candidate {candidate} is missing from {package}")
        digest = file_digest(path)
        stated = raw.get("content_digest")
        if stated is not None and stated != digest:
            log.warning("ignoring stale digest for %s in manifest source", candidate)
        entries.append(ManifestEntry(candidate, raw["destination_path"],
                                     TargetAttributes.from_obj(target), digest,
                                     raw.get("is_enabler", False)))
    rotation = source.get("rotation")
    krl = source.get("krl_update")
    return Manifest(tuple(entries),
                    RotationRequest.from_obj(_resolve(rotation, base_dir)) if rotation else None,
                    KrlDocument.from_obj(_resolve(krl, base_dir)) if krl else None)


def sign_manifest(manifest: Manifest, private_key) -> SignedEnvelope:
    payload = canonicalize(manifest)
    doc = public_doc(private_key)
    return SignedEnvelope(payload, sign_bytes(private_key, payload), fingerprint(doc),
                          doc.algorithm_id)


def sign_package(package_dir: PathLike, manifest_source: Union[PathLike, dict],
                 private_key) -> Path:
    """Compute digests, sign, and write ``manifest.sig.json`` into the package."""
    package = Path(package_dir)
    if isinstance(manifest_source, dict):
        source, base = manifest_source, package
    else:
        source = json.loads(Path(manifest_source).read_bytes())
        base = Path(manifest_source).parent
    if not hasattr(private_key, "sign"):
        private_key = load_private_key(private_key)
    envelope = sign_manifest(build_manifest(package, source, base), private_key)
    out = package / ENVELOPE_FILENAME
    _write_file(out, envelope.to_bytes(), 0o644)
    return out


def make_rotation(old_private_key, new_key: PublicKeyDoc,
                  current_key: Optional[PublicKeyDoc] = None) -> RotationRequest:
    """Authorize ``new_key`` with the currently trusted private key.

    If ``current_key`` is given, the private key must be its counterpart.
    """
    if current_key is not None and public_doc(old_private_key) != current_key:
        raise KeyMismatchError("signing key does not match the currently trusted public key")
    return RotationRequest(new_key, sign_bytes(old_private_key, rotation_message(new_key)))


def make_krl(sequence_number: int, fingerprints: Iterable[Union[str, Fingerprint]]) -> KrlDocument:
    fps = frozenset(fp if isinstance(fp, Fingerprint) else Fingerprint.from_hex(fp)
                    for fp in fingerprints)
    return KrlDocument(sequence_number, fps)


def verify_package(package_dir: PathLike, pubkey: PublicKeyDoc,
                   krl: Optional[KrlDocument] = None) -> dict:
    """Offline self-check: signature, revocation and candidate digests.

    Runs entirely on the vendor machine; no privilege, no sandbox.
    """
    package = Path(package_dir)
    anchors = TrustAnchors(pubkey, krl or KrlDocument())
    envelope = parse_envelope((package / ENVELOPE_FILENAME).read_bytes())
    manifest = verify_envelope(envelope, anchors)
    problems = []
    for entry in manifest.entries:
        try:
            actual = file_digest(package / entry.candidate_path)
        except (OSError, SchemaError) as exc:
            problems.append({"candidate": entry.candidate_path, "error": str(exc)})
            continue
        if actual != entry.content_digest:
            problems.append({"candidate": entry.candidate_path, "error": "digest mismatch"})
    return {"ok": not problems, "signer": envelope.signer_fingerprint.hex,
            "entries": len(manifest.entries), "problems": problems}


# -- CLI ---------------------------------------------------------------------

def _cmd_keygen(args) -> int:
    priv, pub = keygen(args.algorithm, args.out_dir, args.name)
    doc = load_public_doc(pub)
    print(json.dumps({"private_key": str(priv), "public_key": str(pub),
                      "fingerprint": fingerprint(doc).hex}))
    return 0


def _cmd_sign(args) -> int:
    out = sign_package(args.package, args.source, args.key)
    env = parse_envelope(out.read_bytes())
    print(json.dumps({"envelope": str(out), "signer": env.signer_fingerprint.hex}))
    return 0


def _cmd_rotate(args) -> int:
    current = load_public_doc(args.current_pub) if args.current_pub else None
    req = make_rotation(load_private_key(args.old_key), load_public_doc(args.new_pub), current)
    _write_file(Path(args.out), json.dumps(req.to_obj(), sort_keys=True).encode(), 0o644)
    print(json.dumps({"rotation": args.out, "new_key": fingerprint(req.new_key).hex}))
    return 0


def _cmd_krl(args) -> int:
    fps = list(args.revoke or [])
    fps += [fingerprint(load_public_doc(p)).hex for p in args.revoke_key or []]
    krl = make_krl(args.sequence, fps)
    _write_file(Path(args.out), krl.canonical_bytes(), 0o644)
    print(json.dumps({"krl": args.out, "sequence_number": krl.sequence_number,
                      "revoked": len(krl.revoked)}))
    return 0


def _cmd_package_verify(args) -> int:
    krl = KrlDocument.from_bytes(Path(args.krl).read_bytes()) if args.krl else None
    result = verify_package(args.package, load_public_doc(args.pubkey), krl)
    print(json.dumps(result, sort_keys=True))
    return 0 if result["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promotectl-vendor",
                                     description="Vendor signing toolchain for promotectl.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a signing key pair")
    p.add_argument("--algorithm", default=ED25519, choices=sorted(SUPPORTED_ALGORITHMS))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="vendor")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("sign", help="sign a package from a manifest source")
    p.add_argument("--package", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--key", required=True)
    p.set_defaults(func=_cmd_sign)

    p = sub.add_parser("rotate", help="authorize a new public key")
    p.add_argument("--old-key", required=True)
    p.add_argument("--new-pub", required=True)
    p.add_argument("--current-pub")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rotate)

    p = sub.add_parser("krl", help="issue a key revocation list")
    p.add_argument("--sequence", type=int, required=True)
    p.add_argument("--revoke", action="append", metavar="FINGERPRINT")
    p.add_argument("--revoke-key", action="append", metavar="PUBKEY_DOC")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_krl)

    p = sub.add_parser("package", help="package utilities")
    psub = p.add_subparsers(dest="package_command", required=True)
    v = psub.add_parser("verify", help="offline self-check of a signed package")
    v.add_argument("--package", required=True)
    v.add_argument("--pubkey", required=True)
    v.add_argument("--krl")
    v.set_defaults(func=_cmd_package_verify)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PromoteError, OSError, ValueError, KeyError) as exc:
        print(f"promotectl-vendor: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
