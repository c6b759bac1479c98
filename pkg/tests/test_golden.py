"""Frozen artifacts checked against external tools (coreutils, OpenSSL)."""
from __future__ import annotations

import subprocess

from conftest import GOLDEN, golden_key, sha256sum
from promotectl.keys import fingerprint, public_doc
from promotectl.manifest import parse_envelope

FROZEN = {
    "pubkey.doc": "0013e4fca66d144b83d23048fac6df402096f857606c46e8818712919bac3067",
    "payload.json": "905c111adb992b5febc0b9bdca6df0940ac46df45072c0d70a65a9d0b8e894db",
    "helper.bin": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
    "krl.json": "94531bd9254369871777da4fe862218f48add3d8b36e71eabe0824820c150e43",
    "manifest.sig.json": "10c70de14b3c2eacf03a7e59de7e6ab1dfe54d134bd31830961a78fbba4b87f7",
}


def test_frozen_digests():
    for name, digest in FROZEN.items():
        assert sha256sum(GOLDEN / name) == digest, name


def test_openssl_verifies_golden_signature(have_openssl):
    result = subprocess.run(
        ["openssl", "pkeyutl", "-verify", "-pubin", "-inkey", str(GOLDEN / "pub.pem"),
         "-rawin", "-in", str(GOLDEN / "payload.json"), "-sigfile",
         str(GOLDEN / "signature.bin")], capture_output=True, text=True)
    assert result.returncode == 0 and "Signature Verified Successfully" in result.stdout


def test_openssl_rejects_flipped_payload(have_openssl, tmp_path):
    data = bytearray((GOLDEN / "payload.json").read_bytes())
    data[10] ^= 1
    bad = tmp_path / "payload.json"
    bad.write_bytes(bytes(data))
    result = subprocess.run(
        ["openssl", "pkeyutl", "-verify", "-pubin", "-inkey", str(GOLDEN / "pub.pem"),
         "-rawin", "-in", str(bad), "-sigfile", str(GOLDEN / "signature.bin")],
        capture_output=True, text=True)
    assert result.returncode != 0


def test_openssl_public_key_matches_document(have_openssl):
    der = subprocess.run(["openssl", "pkey", "-pubin", "-in", str(GOLDEN / "pub.pem"),
                          "-outform", "DER"], capture_output=True, check=True).stdout
    # An Ed25519 SubjectPublicKeyInfo ends with the 32 raw key bytes.
    assert der[-32:] == public_doc(golden_key()).key_bytes


def test_openssl_signature_verifies_in_package(have_openssl, tmp_path):
    """A signature produced by OpenSSL is accepted by this package's verifier."""
    pem = tmp_path / "key.pem"
    subprocess.run(["openssl", "genpkey", "-algorithm", "ed25519", "-out", str(pem)],
                   check=True, capture_output=True)
    msg = tmp_path / "msg"
    msg.write_bytes(b"signed outside")
    sig = tmp_path / "sig"
    subprocess.run(["openssl", "pkeyutl", "-sign", "-inkey", str(pem), "-rawin", "-in",
                    str(msg), "-out", str(sig)], check=True, capture_output=True)
    from promotectl.vendor import load_private_key
    doc = public_doc(load_private_key(pem))
    assert doc.verify(sig.read_bytes(), b"signed outside")
    assert not doc.verify(sig.read_bytes(), b"signed outsidE")


def test_envelope_signer_is_golden_key():
    env = parse_envelope((GOLDEN / "manifest.sig.json").read_bytes())
    assert env.signer_fingerprint == fingerprint(public_doc(golden_key()))
    assert env.signer_fingerprint.hex == FROZEN["pubkey.doc"]
