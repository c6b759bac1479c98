"""Simulated filesystem backend for unprivileged testing.

Logical absolute paths map into a sandbox directory. Ownership, the full
12-bit mode and capabilities of privileged objects live in
``shadow-attrs.json`` at the sandbox root, keyed by sandbox-relative path.
Each record also pins the (device, inode) identity of the object it
describes: attributes are looked up by identity from an open descriptor, so
a file dropped at a recorded path by the adversary is a different object
and reads back as owned by the service account.

Recorded files are also hard-linked into ``shadow-pins/`` so their inode
numbers stay allocated while a record names them; otherwise a new file
could be handed a freed inode number and inherit a stale record.
"""
from __future__ import annotations

import json
import os
import stat
import threading
from typing import Optional

from .errors import PolicyViolationError
from .handles import FileBackend, StagedHandle, check_capabilities
from .manifest import TargetAttributes
from .privilege import SIM, PrivilegeContext, acquire

SHADOW_FILE = "shadow-attrs.json"
PIN_DIR = "shadow-pins"
RESERVED = (SHADOW_FILE, PIN_DIR)
SERVICE_UID = 1000
SERVICE_GID = 1000


def _atomic_write(path: str, data: bytes, sync: bool = True) -> None:
    tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC | os.O_CLOEXEC, 0o644)
    try:
        os.write(fd, data)
        if sync:
            os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)


class ShadowMap:
    def __init__(self, root: str):
        self.root = root
        self.path = os.path.join(root, SHADOW_FILE)
        self.pins = os.path.join(root, PIN_DIR)
        self.entries: dict[str, dict] = {}
        self.reload()

    def reload(self) -> None:
        try:
            with open(self.path, "rb") as fh:
                self.entries = json.load(fh)
        except FileNotFoundError:
            self.entries = {}

    def save(self, sync: bool = True) -> None:
        data = json.dumps(self.entries, sort_keys=True, indent=1).encode()
        _atomic_write(self.path, data, sync)

    def by_identity(self, dev: int, ino: int) -> Optional[dict]:
        """The record for object (dev, ino), if that object is still at its recorded path.

        The path check stops a freshly created file that reuses the inode
        number of a deleted privileged file from inheriting its record.
        """
        for rel, entry in self.entries.items():
            if entry["dev"] == dev and entry["ino"] == ino:
                try:
                    st = os.lstat(os.path.join(self.root, rel))
                except OSError:
                    continue
                if (st.st_dev, st.st_ino) == (dev, ino):
                    return entry
        return None

    def _pin_name(self, entry: dict) -> str:
        return os.path.join(self.pins, f"{entry['dev']}-{entry['ino']}")

    def _pin(self, rel: str, entry: dict) -> None:
        os.makedirs(self.pins, exist_ok=True)
        try:
            os.link(os.path.join(self.root, rel), self._pin_name(entry), follow_symlinks=False)
        except FileExistsError:
            pass

    def _unpin_if_unused(self, entry: Optional[dict]) -> None:
        if entry is None:
            return
        key = (entry["dev"], entry["ino"])
        if any((e["dev"], e["ino"]) == key for e in self.entries.values()):
            return
        try:
            os.unlink(self._pin_name(entry))
        except FileNotFoundError:
            pass

    def drop(self, rel: str) -> bool:
        entry = self.entries.pop(rel, None)
        self._unpin_if_unused(entry)
        return entry is not None

    def move(self, src: str, dst: str) -> None:
        """Follow a rename of ``src`` onto ``dst``."""
        entry = self.entries.pop(src, None)
        old = self.entries.pop(dst, None)
        if entry is not None:
            self.entries[dst] = entry
        self._unpin_if_unused(old)

    def record(self, rel: str, owner: int, group: int, mode: int, capabilities,
               st: os.stat_result) -> None:
        old = self.entries.get(rel)
        self.entries[rel] = {"owner": owner, "group": group, "mode": mode,
                             "capabilities": [c.lower() for c in capabilities],
                             "dev": st.st_dev, "ino": st.st_ino}
        if stat.S_ISREG(st.st_mode):
            self._pin(rel, self.entries[rel])
        self._unpin_if_unused(old)


class SimBackend(FileBackend):
    name = "sim"

    def __init__(self, root: str, privilege: Optional[PrivilegeContext] = None,
                 service_uid: int = SERVICE_UID, service_gid: int = SERVICE_GID):
        super().__init__(privilege if privilege is not None else acquire(SIM))
        self.root = os.path.abspath(root)
        self.service_uid = service_uid
        self.service_gid = service_gid
        self.shadow = ShadowMap(self.root)

    @staticmethod
    def relative(path: str) -> str:
        if not path.startswith("/"):
            raise PolicyViolationError(f"sandbox paths must be absolute: {path!r}")
        return path.lstrip("/")

    def physical(self, path: str) -> str:
        rel = self.relative(path)
        if rel.split("/")[0] in RESERVED:
            raise PolicyViolationError("the shadow attribute map is not addressable")
        return os.path.join(self.root, rel) if rel else self.root

    def attributes(self, fd, st):
        entry = self.shadow.by_identity(st.st_dev, st.st_ino)
        if entry is None:
            return self.service_uid, self.service_gid, stat.S_IMODE(st.st_mode), ()
        return entry["owner"], entry["group"], entry["mode"], tuple(entry["capabilities"])

    def _apply(self, staged: StagedHandle, target: TargetAttributes) -> None:
        os.fchmod(staged.fd, target.mode & 0o777)
        self.shadow.record(self.relative(staged.staged_path), target.owner_id,
                           target.group_id, target.mode, target.capabilities,
                           os.fstat(staged.fd))
        self.shadow.save()

    def _replaced(self, staged: StagedHandle, destination_path: str) -> None:
        self.shadow.move(self.relative(staged.staged_path), self.relative(destination_path))
        self.shadow.save()

    def _forget(self, path: str) -> None:
        if self.shadow.drop(self.relative(path)):
            self.shadow.save()

    # -- provisioning -----------------------------------------------------
    # Administrator-side setup used by tests, the harness and the CLI's
    # sandbox bootstrap. These bypass the privilege flag on purpose.

    def provision_dir(self, path: str, owner: int = 0, group: int = 0,
                      mode: int = 0o755) -> None:
        self.shadow.reload()
        phys = self.physical(path)
        os.makedirs(phys, exist_ok=True)
        os.chmod(phys, mode & 0o777)
        self.shadow.record(self.relative(path), owner, group, mode, (), os.stat(phys))
        self.shadow.save(sync=False)

    def provision_file(self, path: str, data: bytes, owner: int = 0, group: int = 0,
                       mode: int = 0o644, capabilities=()) -> None:
        check_capabilities(capabilities)
        self.shadow.reload()
        phys = self.physical(path)
        os.makedirs(os.path.dirname(phys), exist_ok=True)
        tmp = phys + ".provision"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, mode & 0o777)
        os.replace(tmp, phys)
        self.shadow.record(self.relative(path), owner, group, mode, capabilities,
                           os.stat(phys, follow_symlinks=False))
        self.shadow.save(sync=False)

    def write_unprivileged(self, path: str, data: bytes, mode: int = 0o644) -> None:
        """Create or overwrite a file as the service account would."""
        phys = self.physical(path)
        os.makedirs(os.path.dirname(phys), exist_ok=True)
        with open(phys, "wb") as fh:
            fh.write(data)
        os.chmod(phys, mode)

    def attributes_at(self, path: str) -> Optional[dict]:
        """Attributes of whatever object is at ``path`` now (None if absent)."""
        self.shadow.reload()
        try:
            st = os.stat(self.physical(path), follow_symlinks=False)
        except FileNotFoundError:
            return None
        owner, group, mode, caps = self.attributes(-1, st)
        return {"owner": owner, "group": group, "mode": mode, "capabilities": list(caps),
                "is_symlink": stat.S_ISLNK(st.st_mode)}

    def read_physical(self, path: str) -> Optional[bytes]:
        try:
            with open(self.physical(path), "rb") as fh:
                return fh.read()
        except (FileNotFoundError, IsADirectoryError):
            return None
