"""Handle-bound filesystem operations.

Every security-relevant read, attribute query, copy and attribute
application goes through an open file descriptor obtained once, never
through a pathname that could be re-resolved. Pathnames are only used to
open candidates and anchors (exactly once each), to create the staging
file, and for the final rename; the last two are chosen by the enabler
from verified data.

Two backends share this module's contract: ``RealBackend`` maps calls to
POSIX syscalls, ``simfs.SimBackend`` runs inside a sandbox directory and
keeps ownership, privileged mode bits and capabilities in a shadow map.
"""
from __future__ import annotations

import errno
import hashlib
import os
import posixpath
import re
import secrets
import stat
import struct
from dataclasses import dataclass, field
from typing import Optional

from .errors import (DiskFullError, MissingFileError, NotRegularFileError, OversizeError,
                     PrivilegeInsufficientError, PromotionError, ReadFailureError,
                     StagingLocationError,
                     SymlinkRejectedError, UnsupportedCapabilityError)
from .manifest import TargetAttributes
from .privilege import PrivilegeContext, require_elevated

CHUNK = 1 << 16
ANCHOR_LIMIT = 1 << 20
STAGE_ATTEMPTS = 16

_OPEN_FLAGS = os.O_RDONLY | os.O_NOFOLLOW | os.O_NONBLOCK | os.O_CLOEXEC | os.O_NOCTTY
_DIR_FLAGS = os.O_RDONLY | os.O_DIRECTORY | os.O_NOFOLLOW | os.O_CLOEXEC
_STAGE_FLAGS = os.O_WRONLY | os.O_CREAT | os.O_EXCL | os.O_NOFOLLOW | os.O_CLOEXEC

# Linux capability numbers (include/uapi/linux/capability.h).
CAPABILITIES = (
    "cap_chown", "cap_dac_override", "cap_dac_read_search", "cap_fowner", "cap_fsetid",
    "cap_kill", "cap_setgid", "cap_setuid", "cap_setpcap", "cap_linux_immutable",
    "cap_net_bind_service", "cap_net_broadcast", "cap_net_admin", "cap_net_raw",
    "cap_ipc_lock", "cap_ipc_owner", "cap_sys_module", "cap_sys_rawio", "cap_sys_chroot",
    "cap_sys_ptrace", "cap_sys_pacct", "cap_sys_admin", "cap_sys_boot", "cap_sys_nice",
    "cap_sys_resource", "cap_sys_time", "cap_sys_tty_config", "cap_mknod", "cap_lease",
    "cap_audit_write", "cap_audit_control", "cap_setfcap", "cap_mac_override",
    "cap_mac_admin", "cap_syslog", "cap_wake_alarm", "cap_block_suspend", "cap_audit_read",
    "cap_perfmon", "cap_bpf", "cap_checkpoint_restore",
)
_CAP_XATTR = "security.capability"
_VFS_CAP_REVISION_2 = 0x02000000
_VFS_CAP_FLAGS_EFFECTIVE = 0x000001


def check_capabilities(names) -> None:
    for name in names:
        if name.lower() not in CAPABILITIES:
            raise UnsupportedCapabilityError(f"unknown capability {name!r}", capability=name)


def encode_capabilities(names) -> bytes:
    """vfs_cap_data (revision 2) granting ``names`` as permitted + effective."""
    check_capabilities(names)
    bits = 0
    for name in names:
        bits |= 1 << CAPABILITIES.index(name.lower())
    return struct.pack("<IIIII", _VFS_CAP_REVISION_2 | _VFS_CAP_FLAGS_EFFECTIVE,
                       bits & 0xFFFFFFFF, 0, bits >> 32, 0)


def decode_capabilities(data: bytes) -> tuple[str, ...]:
    if len(data) < 20:
        return ()
    _, lo, _, hi, _ = struct.unpack("<IIIII", data[:20])
    bits = lo | (hi << 32)
    return tuple(name for i, name in enumerate(CAPABILITIES) if bits >> i & 1)


@dataclass
class ObjectHandle:
    """An open descriptor plus the identity and attributes seen at open time."""

    fd: int
    path: str
    dev: int
    ino: int
    owner: int
    group: int
    mode: int
    size: int
    capabilities: tuple[str, ...] = ()
    is_dir: bool = False
    closed: bool = field(default=False, repr=False)

    @property
    def identity(self) -> tuple[int, int]:
        return self.dev, self.ino

    def requery_identity(self) -> tuple[int, int]:
        st = os.fstat(self.fd)
        return st.st_dev, st.st_ino

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            os.close(self.fd)


@dataclass
class StagedHandle:
    fd: int
    dir_fd: int
    name: str
    dest_dir: str
    digest: str
    size: int
    applied: Optional[TargetAttributes] = None
    closed: bool = field(default=False, repr=False)

    @property
    def staged_path(self) -> str:
        return posixpath.join(self.dest_dir, self.name)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            os.close(self.fd)
            os.close(self.dir_fd)


@dataclass(frozen=True)
class PathOp:
    """One pathname-based syscall, recorded for the no-path-after-validation check."""

    stage: str
    op: str
    path: str


def hash_of(handle: ObjectHandle) -> str:
    """SHA-256 (hex) of the full content, read positionally through the handle."""
    h = hashlib.sha256()
    offset = 0
    try:
        while True:
            chunk = os.pread(handle.fd, CHUNK, offset)
            if not chunk:
                break
            h.update(chunk)
            offset += len(chunk)
    except OSError as exc:
        raise ReadFailureError(f"read failed on {handle.path}: {exc}") from exc
    return h.hexdigest()


def read_all(handle: ObjectHandle, limit: int = ANCHOR_LIMIT) -> bytes:
    parts = []
    offset = 0
    try:
        while True:
            chunk = os.pread(handle.fd, CHUNK, offset)
            if not chunk:
                break
            parts.append(chunk)
            offset += len(chunk)
            if offset > limit:
                raise OversizeError(f"{handle.path} exceeds {limit} bytes", path=handle.path)
    except OSError as exc:
        raise ReadFailureError(f"read failed on {handle.path}: {exc}") from exc
    return b"".join(parts)


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        n = os.write(fd, view)
        view = view[n:]


class FileBackend:
    """Operations shared by the real and simulated backends.

    Subclasses supply pathname translation and attribute semantics.
    """

    name = "abstract"

    def __init__(self, privilege: PrivilegeContext):
        self.privilege = privilege
        self.stage = "init"
        self.path_ops: list[PathOp] = []

    # -- subclass hooks --------------------------------------------------

    def physical(self, path: str) -> str:
        raise NotImplementedError

    def attributes(self, fd: int, st: os.stat_result) -> tuple[int, int, int, tuple[str, ...]]:
        raise NotImplementedError

    def _apply(self, staged: StagedHandle, target: TargetAttributes) -> None:
        raise NotImplementedError

    def _replaced(self, staged: StagedHandle, destination_path: str) -> None:
        """Called after a successful rename of ``staged`` onto the destination."""

    def _discarded(self, staged: StagedHandle) -> None:
        """Called after a staged file was removed."""
        self._forget(staged.staged_path)

    def _forget(self, path: str) -> None:
        """Called after the enabler removed the object at ``path``."""

    # -- handle operations -----------------------------------------------

    def _record(self, op: str, path: str) -> None:
        self.path_ops.append(PathOp(self.stage, op, path))

    def _handle(self, fd: int, path: str) -> ObjectHandle:
        st = os.fstat(fd)
        owner, group, mode, caps = self.attributes(fd, st)
        return ObjectHandle(fd, path, st.st_dev, st.st_ino, owner, group, mode, st.st_size,
                            caps, is_dir=stat.S_ISDIR(st.st_mode))

    def open_readonly(self, path: str) -> ObjectHandle:
        """Open a regular file without following a final symlink."""
        self._record("open", path)
        try:
            fd = os.open(self.physical(path), _OPEN_FLAGS)
        except FileNotFoundError as exc:
            raise MissingFileError(f"{path} does not exist", path=path) from exc
        except OSError as exc:
            if exc.errno == errno.ELOOP:
                raise SymlinkRejectedError(f"{path} is a symbolic link", path=path) from exc
            if exc.errno == errno.ENOTDIR:
                raise MissingFileError(f"{path} does not exist", path=path) from exc
            raise ReadFailureError(f"cannot open {path}: {exc}", path=path) from exc
        try:
            st = os.fstat(fd)
            if not stat.S_ISREG(st.st_mode):
                raise NotRegularFileError(f"{path} is not a regular file", path=path)
            return self._handle(fd, path)
        except BaseException:
            os.close(fd)
            raise

    def open_directory(self, path: str) -> ObjectHandle:
        self._record("open", path)
        try:
            fd = os.open(self.physical(path), _DIR_FLAGS)
        except FileNotFoundError as exc:
            raise MissingFileError(f"directory {path} does not exist", path=path) from exc
        except OSError as exc:
            if exc.errno == errno.ELOOP:
                raise SymlinkRejectedError(f"{path} is a symbolic link", path=path) from exc
            if exc.errno == errno.ENOTDIR:
                raise NotRegularFileError(f"{path} is not a directory", path=path) from exc
            raise ReadFailureError(f"cannot open directory {path}: {exc}", path=path) from exc
        try:
            return self._handle(fd, path)
        except BaseException:
            os.close(fd)
            raise

    def query(self, handle: ObjectHandle) -> tuple[int, int, int, tuple[str, ...]]:
        """Current (owner, group, mode, capabilities), queried via the handle."""
        return self.attributes(handle.fd, os.fstat(handle.fd))

    def copy_to_staged(self, src: ObjectHandle, dest_dir: str,
                       label: str = "promote") -> StagedHandle:
        """Copy the bytes behind ``src`` into a fresh exclusive temp file in ``dest_dir``.

        The returned digest covers exactly the bytes written, so callers can
        detect in-place modification of the source inode after validation.
        """
        require_elevated(self.privilege, "copy_to_staged")

        def chunks():
            offset = 0
            while True:
                try:
                    chunk = os.pread(src.fd, CHUNK, offset)
                except OSError as exc:
                    raise ReadFailureError(f"read failed on {src.path}: {exc}") from exc
                if not chunk:
                    return
                offset += len(chunk)
                yield chunk

        return self._stage(dest_dir, label, chunks())

    def stage_bytes(self, data: bytes, dest_dir: str, label: str = "promote") -> StagedHandle:
        """Stage in-memory bytes (trust-anchor updates) the same way as a copy."""
        require_elevated(self.privilege, "stage_bytes")
        return self._stage(dest_dir, label, iter((data,)))

    def _stage(self, dest_dir: str, label: str, chunks) -> StagedHandle:
        dir_handle = self.open_directory(dest_dir)
        dir_fd = dir_handle.fd
        fd = name = None
        try:
            for _ in range(STAGE_ATTEMPTS):
                name = f".{label}.{secrets.token_hex(8)}.tmp"
                self._record("create", posixpath.join(dest_dir, name))
                try:
                    fd = os.open(name, _STAGE_FLAGS, 0o600, dir_fd=dir_fd)
                    break
                except FileExistsError:
                    continue
            else:
                raise PromotionError(f"could not create a unique staging file in {dest_dir}")
            h = hashlib.sha256()
            size = 0
            for chunk in chunks:
                _write_all(fd, chunk)
                h.update(chunk)
                size += len(chunk)
            os.fsync(fd)
            return StagedHandle(fd, dir_fd, name, dest_dir, h.hexdigest(), size)
        except BaseException as exc:
            if fd is not None:
                os.close(fd)
                try:
                    os.unlink(name, dir_fd=dir_fd)
                except OSError:
                    pass
            os.close(dir_fd)
            if isinstance(exc, OSError) and exc.errno == errno.ENOSPC:
                raise DiskFullError(f"no space left staging into {dest_dir}") from exc
            if isinstance(exc, OSError):
                raise PromotionError(f"staging into {dest_dir} failed: {exc}") from exc
            raise

    def sweep_stale(self, dest_dir: str, label: str) -> list[str]:
        """Remove staging files for ``label`` left in ``dest_dir`` by a killed run.

        Only called with the run lock held, so no live staging file can match.
        """
        require_elevated(self.privilege, "sweep_stale")
        pattern = re.compile(rf"\.{re.escape(label)}\.[0-9a-f]{{16}}\.tmp")
        handle = self.open_directory(dest_dir)
        removed = []
        try:
            for name in os.listdir(handle.fd):
                if not pattern.fullmatch(name):
                    continue
                path = posixpath.join(dest_dir, name)
                self._record("unlink", path)
                try:
                    os.unlink(name, dir_fd=handle.fd)
                except FileNotFoundError:
                    continue
                self._forget(path)
                removed.append(path)
        finally:
            handle.close()
        return removed

    def open_private(self, path: str) -> int:
        """Open (creating 0600 if needed) an enabler-owned append-only file.

        Used for the lock file and the audit log, both in the anchors directory.
        """
        self._record("open", path)
        try:
            return os.open(self.physical(path),
                           os.O_WRONLY | os.O_APPEND | os.O_CREAT | os.O_NOFOLLOW | os.O_CLOEXEC,
                           0o600)
        except OSError as exc:
            raise PromotionError(f"cannot open {path}: {exc}", path=path) from exc

    def apply_attributes(self, staged: StagedHandle, target: TargetAttributes) -> None:
        """Set ownership, mode and capabilities through the staged descriptor."""
        try:
            require_elevated(self.privilege, "apply_attributes")
            check_capabilities(target.capabilities)
            self._apply(staged, target)
        except BaseException:
            self.discard(staged)
            raise
        staged.applied = target

    def atomic_replace(self, staged: StagedHandle, destination_path: str) -> None:
        require_elevated(self.privilege, "atomic_replace")
        parent, base = posixpath.split(destination_path)
        parent_handle = self.open_directory(parent)
        try:
            dir_st = os.fstat(staged.dir_fd)
            if parent_handle.identity != (dir_st.st_dev, dir_st.st_ino):
                raise StagingLocationError(
                    f"staged file is not in the directory of {destination_path}")
        finally:
            parent_handle.close()
        self._record("rename", destination_path)
        try:
            os.rename(staged.name, base, src_dir_fd=staged.dir_fd, dst_dir_fd=staged.dir_fd)
        except OSError as exc:
            raise PromotionError(f"rename onto {destination_path} failed: {exc}") from exc
        self._replaced(staged, destination_path)
        os.fsync(staged.dir_fd)
        staged.close()

    def discard(self, staged: StagedHandle) -> None:
        if staged.closed:
            return
        self._record("unlink", staged.staged_path)
        try:
            os.unlink(staged.name, dir_fd=staged.dir_fd)
        except OSError:
            pass
        self._discarded(staged)
        staged.close()


class RealBackend(FileBackend):
    name = "real"

    def physical(self, path: str) -> str:
        return path

    def attributes(self, fd, st):
        try:
            caps = decode_capabilities(os.getxattr(fd, _CAP_XATTR))
        except OSError:
            caps = ()
        return st.st_uid, st.st_gid, stat.S_IMODE(st.st_mode), caps

    def _apply(self, staged, target):
        try:
            # chown clears setuid bits and capabilities, so it goes first.
            os.fchown(staged.fd, target.owner_id, target.group_id)
            os.fchmod(staged.fd, target.mode)
            if target.capabilities:
                os.setxattr(staged.fd, _CAP_XATTR, encode_capabilities(target.capabilities))
        except PermissionError as exc:
            raise PrivilegeInsufficientError(f"cannot apply attributes: {exc}") from exc
        except OSError as exc:
            if exc.errno in (errno.ENOTSUP, errno.EOPNOTSUPP):
                raise UnsupportedCapabilityError(
                    "filesystem does not support file capabilities") from exc
            raise PromotionError(f"cannot apply attributes: {exc}") from exc
