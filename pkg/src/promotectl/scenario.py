"""Sandbox host layouts for the simulated backend.

Builds a small host inside a sandbox directory (root-owned system
directories, trust anchors, an installed enabler, a service-owned spool
for incoming packages) and signs packages into it with the vendor tools.
Used by the race harness, the test suite and the acceptance suite.
"""
from __future__ import annotations

import hashlib
import json
import os
import posixpath
import re
import stat
import sys
from dataclasses import dataclass
from typing import Iterable, Optional

from . import privilege, vendor
from .engine import AUDIT_FILE, KEY_FILE, KRL_FILE, LOCK_FILE, EngineConfig
from .keys import ED25519, KrlDocument, PublicKeyDoc, RotationRequest, public_doc
from .manifest import TargetAttributes
from .simfs import RESERVED, SERVICE_GID, SERVICE_UID, SimBackend

ANCHORS_DIR = "/etc/promotectl"
SPOOL_DIR = "/var/spool/promotectl"
DEST_DIR = "/opt/vendor/bin"
ENABLER_PATH = "/usr/sbin/promotectl"

ROOT_DIRS = ("/", "/etc", "/usr", "/usr/sbin", "/opt", "/opt/vendor", DEST_DIR,
             "/var", "/var/spool")

SETUID_ROOT = TargetAttributes(0, 0, 0o4755)
ENABLER_TARGET = TargetAttributes(0, 0, 0o755)

STAGING_NAME = re.compile(r"\.(?P<label>.+)\.[0-9a-f]{16}\.tmp")


def enabler_script(build: str) -> bytes:
    """A runnable enabler for the sandbox: a launcher for this package's CLI."""
    return (f"#!{sys.executable}\n"
            f"# promotectl enabler build {build}\n"
            "import sys\n"
            "from promotectl.cli import main\n"
            "sys.exit(main())\n").encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class FileSpec:
    """One candidate in a package: where it lives, where it goes, what it becomes."""

    candidate: str
    data: bytes
    destination: str
    target: TargetAttributes = SETUID_ROOT
    is_enabler: bool = False

    @property
    def digest(self) -> str:
        return sha256_hex(self.data)


def helper(index: int, data: Optional[bytes] = None, target: TargetAttributes = SETUID_ROOT,
           dest_dir: str = DEST_DIR) -> FileSpec:
    if data is None:
        data = f"helper {index} build 1\n".encode()
    return FileSpec(f"bin/helper{index}", data, f"{dest_dir}/helper{index}", target)


def enabler_update(build: str = "2") -> FileSpec:
    return FileSpec("sbin/promotectl", enabler_script(build), ENABLER_PATH, ENABLER_TARGET,
                    is_enabler=True)


class Scenario:
    """A provisioned sandbox host plus the vendor key that its anchors trust."""

    def __init__(self, root: str, vendor_key=None, *, krl: Optional[KrlDocument] = None,
                 anchors_writable: bool = False, enabler_build: str = "1"):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.fs = SimBackend(self.root, privilege.PrivilegeContext(privilege.SIM))
        self.vendor_key = vendor_key if vendor_key is not None else \
            vendor.generate_private_key(ED25519)
        self.anchors_writable = anchors_writable
        for path in ROOT_DIRS:
            self.fs.provision_dir(path)
        if anchors_writable:
            # A misconfigured host where the service account can rename
            # entries in the anchors directory (the files stay root-owned).
            self.fs.provision_dir(ANCHORS_DIR, SERVICE_UID, SERVICE_GID, 0o755)
        else:
            self.fs.provision_dir(ANCHORS_DIR)
        self.fs.provision_dir(SPOOL_DIR, SERVICE_UID, SERVICE_GID, 0o755)
        self.install_anchors(public_doc(self.vendor_key), krl)
        self.fs.provision_file(ENABLER_PATH, enabler_script(enabler_build), mode=0o755)

    # -- layout ------------------------------------------------------------

    @property
    def key_path(self) -> str:
        return posixpath.join(ANCHORS_DIR, KEY_FILE)

    @property
    def krl_path(self) -> str:
        return posixpath.join(ANCHORS_DIR, KRL_FILE)

    def physical(self, path: str) -> str:
        return self.fs.physical(path)

    def install_anchors(self, key: PublicKeyDoc, krl: Optional[KrlDocument] = None) -> None:
        self.fs.provision_file(self.key_path, key.canonical_bytes())
        if krl is not None:
            self.fs.provision_file(self.krl_path, krl.canonical_bytes())

    def read(self, path: str) -> Optional[bytes]:
        return self.fs.read_physical(path)

    def digest_at(self, path: str) -> Optional[str]:
        data = self.read(path)
        return None if data is None else sha256_hex(data)

    def attributes_at(self, path: str) -> Optional[dict]:
        return self.fs.attributes_at(path)

    def trusted_key(self) -> PublicKeyDoc:
        return PublicKeyDoc.from_bytes(self.read(self.key_path))

    def trusted_krl(self) -> KrlDocument:
        raw = self.read(self.krl_path)
        return KrlDocument() if raw is None else KrlDocument.from_bytes(raw)

    def audit_events(self) -> list[dict]:
        raw = self.read(posixpath.join(ANCHORS_DIR, AUDIT_FILE)) or b""
        return [json.loads(line) for line in raw.splitlines() if line.strip()]

    # -- packages ----------------------------------------------------------

    def add_package(self, name: str, files: Iterable[FileSpec], *,
                    rotation: Optional[RotationRequest] = None,
                    krl_update: Optional[KrlDocument] = None, signer=None) -> str:
        """Write candidates into the spool and sign a package. Returns its logical root."""
        package = posixpath.join(SPOOL_DIR, name)
        entries = []
        for spec in files:
            self.fs.write_unprivileged(posixpath.join(package, spec.candidate), spec.data,
                                       mode=0o644)
            entries.append({"candidate_path": spec.candidate,
                            "destination_path": spec.destination,
                            "target": spec.target.to_obj(),
                            "is_enabler": spec.is_enabler})
        os.makedirs(self.physical(package), exist_ok=True)
        source: dict = {"entries": entries}
        if rotation is not None:
            source["rotation"] = rotation.to_obj()
        if krl_update is not None:
            source["krl_update"] = krl_update.to_obj()
        vendor.sign_package(self.physical(package), source,
                            signer if signer is not None else self.vendor_key)
        return package

    def config(self, package: str, **overrides) -> EngineConfig:
        kwargs = dict(package_root=package, anchors_dir=ANCHORS_DIR, backend=privilege.SIM,
                      sandbox=self.root, enabler_path=ENABLER_PATH)
        kwargs.update(overrides)
        return EngineConfig(**kwargs)

    def cli_args(self, command: str, package: Optional[str] = None) -> list[str]:
        args = [command]
        if package is not None:
            args += ["--package", package]
        args += ["--anchors", ANCHORS_DIR, "--backend", "sim", "--sandbox", self.root]
        if command != "show-trust":
            args += ["--enabler-path", ENABLER_PATH]
        return args

    def snapshot(self) -> dict[str, dict]:
        return snapshot_tree(self.fs)


def snapshot_tree(fs: SimBackend) -> dict[str, dict]:
    """Every object in the sandbox: kind, identity, content digest and attributes."""
    fs.shadow.reload()
    out: dict[str, dict] = {}
    for dirpath, dirnames, filenames in os.walk(fs.root):
        if dirpath == fs.root:
            dirnames[:] = [d for d in dirnames if d not in RESERVED]
        for name in dirnames + filenames:
            phys = os.path.join(dirpath, name)
            rel = os.path.relpath(phys, fs.root)
            if rel.startswith(RESERVED):
                continue
            try:
                st = os.lstat(phys)
            except FileNotFoundError:
                continue
            owner, group, mode, caps = fs.attributes(-1, st)
            record = {"ino": st.st_ino, "owner": owner, "group": group, "mode": mode,
                      "capabilities": sorted(caps)}
            if stat.S_ISLNK(st.st_mode):
                record.update(kind="link", target=os.readlink(phys))
            elif stat.S_ISDIR(st.st_mode):
                record.update(kind="dir")
            else:
                with open(phys, "rb") as fh:
                    data = fh.read()
                record.update(kind="file", digest=sha256_hex(data), size=len(data))
            out["/" + rel] = record
    return out


def staging_label(path: str) -> Optional[str]:
    """The destination basename a staging file was created for, or None."""
    m = STAGING_NAME.fullmatch(posixpath.basename(path))
    return m.group("label") if m else None


def partial_files(snapshot: dict[str, dict]) -> list[str]:
    """Leftover staging files anywhere in the tree."""
    return sorted(p for p, rec in snapshot.items()
                  if rec["kind"] == "file" and staging_label(p) is not None)


RUNTIME_FILES = frozenset({posixpath.join(ANCHORS_DIR, LOCK_FILE),
                           posixpath.join(ANCHORS_DIR, AUDIT_FILE)})
