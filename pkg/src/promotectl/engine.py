"""Three-phase promotion workflow.

    setup     (elevated)    lock, open anchors by handle, load them, drop
    validate  (unelevated)  verify envelope, open + hash every candidate
    regain
    self-update             install a new enabler and exec into it
    trust                   install KRL / rotated key
    promote   (elevated)    copy from validated handles, fchown/fchmod, rename

Any failure before ``promote`` leaves the system untouched. During
``promote`` each component is replaced atomically, so an abort leaves a
fully promoted prefix of the plan and nothing half-written.

The ordering above runs self-update before trust updates so that a new
enabler re-validates the package under the same trust state the old one
used; see README for the rationale.
"""
from __future__ import annotations

import fcntl
import hashlib
import json
import os
import posixpath
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Optional

from . import privilege
from .errors import (EXIT_ANCHOR, EXIT_DIGEST, EXIT_OK, EXIT_PROMOTION, EXIT_TRUST_UPDATE,
                     ContractViolation, DigestMismatchError, EngineKilled, HandleError,
                     InjectedFailure, LockContentionError, MalformedEnvelopeError,
                     MarkerMismatchError, MissingFileError, NotRegularFileError, OversizeError,
                     PolicyViolationError, PromoteError, PromotionError, ReadFailureError,
                     RevokedSignerError, RotationRejectedError, SymlinkRejectedError)
from .handles import FileBackend, ObjectHandle, RealBackend, hash_of, read_all
from .keys import Fingerprint, KrlDocument, PublicKeyDoc, fingerprint
from .manifest import ENVELOPE_FILENAME, Manifest, ManifestEntry, TargetAttributes, parse_envelope
from .simfs import SimBackend
from .trust import (REVOKED, TrustAnchors, check_revocation, load_anchors, merge_krl,
                    verify_envelope, verify_rotation)

KEY_FILE = "pubkey.doc"
KRL_FILE = "krl.json"
LOCK_FILE = ".promotectl.lock"
AUDIT_FILE = "audit.log"
RESUME_FLAG = "--self-updated"
ENVELOPE_LIMIT = 16 << 20
ANCHOR_TARGET = TargetAttributes(0, 0, 0o644)

PENDING = "pending"
VALIDATED = "validated"
PROMOTED = "promoted"
SKIPPED = "skipped-idempotent"
FAILED = "failed"

STAGES = ("setup", "validate", "self-update", "trust", "promote")

# Exit code for generic (non-specific) failures, by stage.
_STAGE_EXIT = {"setup": EXIT_ANCHOR, "validate": EXIT_DIGEST, "self-update": EXIT_PROMOTION,
               "trust": EXIT_TRUST_UPDATE, "promote": EXIT_PROMOTION}

# Errors whose meaning depends on where they happen: a missing file is an
# anchor failure in setup, a candidate failure in validation, and a
# promotion failure afterwards.
_STAGE_DEPENDENT = (MissingFileError, SymlinkRejectedError, NotRegularFileError,
                    ReadFailureError, OversizeError, InjectedFailure)

Hook = Callable[[str], None]


def _under(path: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/") or "/"
    return path == prefix or path.startswith(prefix if prefix == "/" else prefix + "/")


@dataclass
class EngineConfig:
    package_root: str
    anchors_dir: str
    allow_prefix: Optional[str] = None
    backend: str = privilege.SIM
    self_updated: bool = False
    sandbox: Optional[str] = None
    enabler_path: Optional[str] = None
    audit_log: Optional[str] = None
    argv: list[str] = field(default_factory=list)
    drop_uid: Optional[int] = None
    drop_gid: Optional[int] = None

    def __post_init__(self):
        for name in ("package_root", "anchors_dir"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.startswith("/"):
                raise ContractViolation(f"{name} must be an absolute path, got {value!r}")
        if self.backend not in privilege.BACKENDS:
            raise ContractViolation(f"unknown backend {self.backend!r}")
        if self.backend == privilege.SIM and not self.sandbox:
            raise ContractViolation("the simulated backend needs a sandbox directory")

    @property
    def key_path(self) -> str:
        return posixpath.join(self.anchors_dir, KEY_FILE)

    @property
    def krl_path(self) -> str:
        return posixpath.join(self.anchors_dir, KRL_FILE)

    @property
    def audit_path(self) -> str:
        return self.audit_log or posixpath.join(self.anchors_dir, AUDIT_FILE)

    @property
    def lock_path(self) -> str:
        return posixpath.join(self.anchors_dir, LOCK_FILE)


@dataclass
class PlanItem:
    entry: ManifestEntry
    handle: ObjectHandle
    digest: str


@dataclass
class PromotionPlan:
    manifest: Manifest
    items: list[PlanItem]
    signer: Fingerprint
    new_krl: Optional[KrlDocument] = None
    new_key: Optional[PublicKeyDoc] = None

    @property
    def enabler_index(self) -> Optional[int]:
        return self.manifest.enabler_index

    def close(self) -> None:
        for item in self.items:
            item.handle.close()


@dataclass
class EntryResult:
    destination: str
    status: str = PENDING
    digest: Optional[str] = None


@dataclass
class RunReport:
    outcome: str = "success"
    stage: Optional[str] = None
    error_code: Optional[str] = None
    error: Optional[str] = None
    exit_code: int = EXIT_OK
    entries: list[EntryResult] = field(default_factory=list)
    trust_changes: list[dict] = field(default_factory=list)
    self_update_performed: bool = False
    resumed: bool = False
    verify_only: bool = False
    signer: Optional[str] = None
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.outcome in ("success", "handoff")

    def statuses(self) -> list[str]:
        return [e.status for e in self.entries]

    def to_dict(self) -> dict:
        return asdict(self)


class AuditLog:
    """One JSON object per line: {ts, stage, event, detail}.

    Events are kept in memory and, once a file descriptor is attached,
    appended to the log file as they happen.
    """

    def __init__(self):
        self.events: list[dict] = []
        self.fd: Optional[int] = None

    def attach(self, fd: int) -> None:
        self.fd = fd
        for event in self.events:
            self._write(event)

    def _write(self, event: dict) -> None:
        os.write(self.fd, json.dumps(event, sort_keys=True).encode() + b"\n")

    def emit(self, stage: str, event: str, **detail) -> dict:
        record = {"ts": datetime.now(timezone.utc).isoformat(timespec="microseconds"),
                  "stage": stage, "event": event, "detail": detail}
        self.events.append(record)
        if self.fd is not None:
            self._write(record)
        return record

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None


def _default_exec(path: str, argv: list[str]) -> None:
    sys.stdout.flush()
    sys.stderr.flush()
    os.execv(path, argv)


def _running_enabler_digest() -> Optional[str]:
    try:
        with open(sys.argv[0], "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except (OSError, IndexError):
        return None


class Engine:
    """Drives one run. Not reusable: construct a fresh Engine per run.

    ``hooks`` is test instrumentation: a callable invoked with a barrier
    name (``"validate:start"``, ``"promote:after_attrs:3"``, ...) at every
    stage boundary and between promotion steps. It may block, mutate the
    filesystem as an adversary, or raise InjectedFailure / EngineKilled.
    """

    def __init__(self, config: EngineConfig, *, hooks: Optional[Hook] = None,
                 exec_fn: Optional[Callable[[str, list[str]], None]] = None):
        self.config = config
        self.hooks = hooks
        self.exec_fn = exec_fn or _default_exec
        self.audit = AuditLog()
        self.report = RunReport(resumed=config.self_updated)
        self.ctx: Optional[privilege.PrivilegeContext] = None
        self.backend: Optional[FileBackend] = None
        self.plan: Optional[PromotionPlan] = None
        self.stage = "setup"
        self._lock_fd: Optional[int] = None

    # -- plumbing --------------------------------------------------------

    def _hook(self, point: str) -> None:
        if self.hooks is not None:
            self.hooks(point)

    def _emit(self, event: str, **detail) -> None:
        detail["elevated"] = privilege.is_elevated(self.ctx) if self.ctx else None
        self.audit.emit(self.stage, event, **detail)

    def _enter(self, stage: str) -> float:
        self.stage = stage
        if self.backend is not None:
            self.backend.stage = stage
        return time.perf_counter()

    def _timed(self, stage: str, started: float) -> None:
        self.report.timings_ms[stage] = round((time.perf_counter() - started) * 1000, 3)

    def _make_backend(self) -> FileBackend:
        if self.config.backend == privilege.REAL:
            return RealBackend(self.ctx)
        return SimBackend(self.config.sandbox, self.ctx)

    def release(self) -> None:
        """Close every descriptor the run holds (what process exit would do)."""
        if self.plan is not None:
            self.plan.close()
        self.audit.close()
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None

    def _exit_code(self, exc: PromoteError) -> int:
        if isinstance(exc, _STAGE_DEPENDENT):
            return _STAGE_EXIT.get(self.stage, EXIT_PROMOTION)
        return exc.exit_code

    # -- run -------------------------------------------------------------

    def run(self, verify_only: bool = False) -> RunReport:
        report = self.report
        report.verify_only = verify_only
        started = time.perf_counter()
        try:
            self._run(verify_only)
        except PromoteError as exc:
            self._abort(exc)
        except OSError as exc:
            wrapped = PromotionError(f"unexpected OS error: {exc}")
            self._abort(wrapped, exit_code=_STAGE_EXIT.get(self.stage, EXIT_PROMOTION))
        except EngineKilled:
            self.release()
            raise
        finally:
            report.timings_ms["total"] = round((time.perf_counter() - started) * 1000, 3)
        self.release()
        return report

    def _abort(self, exc: PromoteError, exit_code: Optional[int] = None) -> None:
        report = self.report
        report.outcome = "aborted"
        report.stage = self.stage
        report.error_code = exc.code
        report.error = str(exc)
        report.exit_code = exit_code if exit_code is not None else self._exit_code(exc)
        self._emit("run_aborted", code=exc.code, error=str(exc), exit_code=report.exit_code,
                   **{k: v for k, v in exc.detail.items() if isinstance(v, (str, int))})

    def _run(self, verify_only: bool) -> None:
        cfg = self.config
        t = self._enter("setup")
        self.ctx = privilege.acquire(cfg.backend, drop_uid=cfg.drop_uid, drop_gid=cfg.drop_gid)
        self.backend = self._make_backend()
        self.backend.stage = "setup"
        self._emit("start", pid=os.getpid(), resume=cfg.self_updated, verify_only=verify_only,
                   backend=cfg.backend, enabler_digest=_running_enabler_digest())
        anchors = self.phase_setup(verify_only)
        self._timed("setup", t)

        t = self._enter("validate")
        self.plan = self.phase_validate(anchors)
        self._timed("validate", t)
        if verify_only:
            self._emit("verify_only_complete")
            return

        t = self._enter("self-update")
        privilege.regain(self.ctx, privilege.VALIDATION_COMPLETE)
        self._emit("privilege_regained")
        handed_off = self.self_update(self.plan)
        self._timed("self-update", t)
        if handed_off:
            self.report.outcome = "handoff"
            return

        t = self._enter("trust")
        self.apply_trust_updates(self.plan, anchors)
        self._timed("trust", t)

        t = self._enter("promote")
        self.phase_promote(self.plan)
        self._timed("promote", t)
        self._emit("run_complete", promoted=self.report.statuses().count(PROMOTED),
                   skipped=self.report.statuses().count(SKIPPED))

    # -- phase 1 ---------------------------------------------------------

    def _acquire_lock(self) -> None:
        fd = self.backend.open_private(self.config.lock_path)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            os.close(fd)
            raise LockContentionError("another enabler run holds the lock") from exc
        self._lock_fd = fd

    def phase_setup(self, verify_only: bool = False) -> TrustAnchors:
        if not privilege.is_elevated(self.ctx):
            raise ContractViolation("setup must start elevated")
        self._hook("setup:start")
        cfg = self.config
        if not verify_only:
            self._acquire_lock()
            self.audit.attach(self.backend.open_private(cfg.audit_path))
            self._emit("lock_acquired")
        key_handle = self.backend.open_readonly(cfg.key_path)
        krl_handle = None
        try:
            try:
                krl_handle = self.backend.open_readonly(cfg.krl_path)
            except MissingFileError:
                krl_handle = None
            self._hook("setup:anchors_opened")
            anchors = load_anchors(key_handle, krl_handle)
        finally:
            key_handle.close()
            if krl_handle is not None:
                krl_handle.close()
        self._emit("anchors_loaded", fingerprint=anchors.fingerprint.hex,
                   krl_sequence=anchors.krl.sequence_number,
                   revoked=len(anchors.krl.revoked))
        if check_revocation(anchors.fingerprint, anchors) == REVOKED:
            raise RevokedSignerError("the trusted key itself is revoked",
                                     fingerprint=anchors.fingerprint.hex)
        self._hook("setup:done")
        privilege.drop(self.ctx)
        self._emit("privilege_dropped")
        return anchors

    # -- phase 2 ---------------------------------------------------------

    def _check_policy(self, manifest: Manifest) -> None:
        cfg = self.config
        for i, entry in enumerate(manifest.entries):
            dest = entry.destination_path
            if cfg.allow_prefix and not _under(dest, cfg.allow_prefix):
                raise PolicyViolationError(f"{dest} is outside {cfg.allow_prefix}", entry=i)
            if _under(dest, cfg.anchors_dir):
                raise PolicyViolationError(f"{dest} is inside the anchors directory", entry=i)
            if entry.is_enabler and dest != cfg.enabler_path:
                raise PolicyViolationError(
                    f"enabler entry targets {dest}, installed enabler is {cfg.enabler_path}",
                    entry=i)

    def _check_destination_dir(self, index: int, dest: str) -> None:
        parent = posixpath.dirname(dest)
        try:
            handle = self.backend.open_directory(parent)
        except HandleError as exc:
            raise PolicyViolationError(f"destination directory {parent}: {exc}",
                                       entry=index) from exc
        try:
            if handle.owner != 0 or handle.mode & 0o022:
                raise PolicyViolationError(
                    f"destination directory {parent} is writable by non-root accounts",
                    entry=index)
        finally:
            handle.close()

    def phase_validate(self, anchors: TrustAnchors) -> PromotionPlan:
        if privilege.is_elevated(self.ctx):
            raise ContractViolation("validation must run unelevated")
        cfg = self.config
        self._hook("validate:start")
        try:
            env_handle = self.backend.open_readonly(
                posixpath.join(cfg.package_root, ENVELOPE_FILENAME))
            try:
                raw = read_all(env_handle, ENVELOPE_LIMIT)
            finally:
                env_handle.close()
        except HandleError as exc:
            raise MalformedEnvelopeError(f"cannot read envelope: {exc}") from exc
        envelope = parse_envelope(raw)
        self.report.signer = envelope.signer_fingerprint.hex
        # Revocation is decided before any cryptographic or payload work.
        if check_revocation(envelope.signer_fingerprint, anchors) == REVOKED:
            raise RevokedSignerError(f"signer {envelope.signer_fingerprint} is revoked",
                                     fingerprint=envelope.signer_fingerprint.hex)
        manifest = verify_envelope(envelope, anchors)
        self.report.entries = [EntryResult(e.destination_path) for e in manifest.entries]
        self._emit("envelope_verified", signer=envelope.signer_fingerprint.hex,
                   entries=len(manifest.entries))
        self._hook("validate:envelope_verified")
        self._check_policy(manifest)

        plan = PromotionPlan(manifest, [], envelope.signer_fingerprint)
        try:
            self._precheck_trust_updates(plan, anchors)
            for i, entry in enumerate(manifest.entries):
                self._hook(f"validate:before_open:{i}")
                handle = self.backend.open_readonly(
                    posixpath.join(cfg.package_root, entry.candidate_path))
                plan.items.append(PlanItem(entry, handle, ""))
                self._hook(f"validate:after_open:{i}")
                digest = hash_of(handle)
                if digest != entry.content_digest:
                    raise DigestMismatchError(
                        f"{entry.candidate_path}: digest {digest} != {entry.content_digest}",
                        entry=i, candidate=entry.candidate_path)
                plan.items[-1].digest = digest
                self._check_destination_dir(i, entry.destination_path)
                self.report.entries[i].status = VALIDATED
                self.report.entries[i].digest = digest
                self._emit("entry_validated", entry=i, candidate=entry.candidate_path,
                           destination=entry.destination_path, digest=digest)
        except BaseException:
            plan.close()
            raise
        self._hook("validate:done")
        self._emit("validation_complete", entries=len(plan.items))
        return plan

    def _precheck_trust_updates(self, plan: PromotionPlan, anchors: TrustAnchors) -> None:
        """Decide trust updates while unelevated; the trust stage only installs them."""
        manifest = plan.manifest
        krl = anchors.krl
        if manifest.krl_update is not None:
            krl = merge_krl(anchors.krl, manifest.krl_update)
            plan.new_krl = krl
        if manifest.rotation is not None:
            new_key = verify_rotation(manifest.rotation, anchors)
            if new_key != anchors.key:
                if fingerprint(new_key) in krl.revoked:
                    raise RotationRejectedError("rotation target key is revoked")
                plan.new_key = new_key

    # -- self-update -----------------------------------------------------

    def _is_current(self, entry: ManifestEntry) -> bool:
        try:
            handle = self.backend.open_readonly(entry.destination_path)
        except (MissingFileError, SymlinkRejectedError, NotRegularFileError):
            return False
        try:
            owner, group, mode, caps = self.backend.query(handle)
            target = entry.target
            if (owner, group, mode) != (target.owner_id, target.group_id, target.mode):
                return False
            if sorted(caps) != sorted(c.lower() for c in target.capabilities):
                return False
            return hash_of(handle) == entry.content_digest
        finally:
            handle.close()

    def _promote_item(self, index: int, item: PlanItem) -> None:
        entry = item.entry
        if item.handle.requery_identity() != item.handle.identity:
            raise PromotionError(f"validated handle for entry {index} changed identity")
        parent, base = posixpath.split(entry.destination_path)
        self._sweep(parent, base)
        staged = self.backend.copy_to_staged(item.handle, parent, label=base)
        try:
            self._hook(f"promote:after_stage:{index}")
            if staged.digest != item.digest:
                raise DigestMismatchError(
                    f"candidate for entry {index} changed in place after validation",
                    entry=index)
            self.backend.apply_attributes(staged, entry.target)
            self._emit("attributes_applied", entry=index, owner=entry.target.owner_id,
                       group=entry.target.group_id, mode=f"{entry.target.mode:04o}",
                       capabilities=list(entry.target.capabilities))
            self._hook(f"promote:after_attrs:{index}")
            self.backend.atomic_replace(staged, entry.destination_path)
        except Exception:
            self.backend.discard(staged)
            self.report.entries[index].status = FAILED
            raise
        self.report.entries[index].status = PROMOTED
        self._emit("promoted", entry=index, destination=entry.destination_path,
                   digest=staged.digest)

    def self_update(self, plan: PromotionPlan) -> bool:
        """Install a new enabler and exec into it. Returns True on handoff."""
        cfg = self.config
        index = plan.enabler_index
        if index is None:
            if cfg.self_updated:
                raise MarkerMismatchError("resume marker set but the manifest has no enabler entry")
            return False
        item = plan.items[index]
        if self._is_current(item.entry):
            self.report.entries[index].status = SKIPPED
            self._emit("skipped_idempotent", entry=index, destination=item.entry.destination_path)
            return False
        if cfg.self_updated:
            raise MarkerMismatchError("resumed enabler is not the one the manifest authorizes")
        self._hook("self-update:start")
        self._promote_item(index, item)
        self.report.self_update_performed = True
        target = self.backend.physical(item.entry.destination_path)
        argv = [target] + [a for a in cfg.argv if a != RESUME_FLAG] + [RESUME_FLAG]
        self._emit("exec_handoff", path=item.entry.destination_path, argv=argv,
                   digest=item.digest, pid=os.getpid())
        self._hook("self-update:before_exec")
        self.release()
        try:
            self.exec_fn(target, argv)
        except OSError as exc:
            raise PromotionError(f"exec into updated enabler failed: {exc}") from exc
        return True

    # -- trust updates ---------------------------------------------------

    def _sweep(self, directory: str, label: str) -> None:
        for path in self.backend.sweep_stale(directory, label):
            self._emit("stale_staging_removed", path=path)

    def _install_anchor(self, path: str, data: bytes) -> None:
        label = posixpath.basename(path)
        self._sweep(self.config.anchors_dir, label)
        staged = self.backend.stage_bytes(data, self.config.anchors_dir, label=label)
        try:
            self.backend.apply_attributes(staged, ANCHOR_TARGET)
            self.backend.atomic_replace(staged, path)
        except Exception:
            self.backend.discard(staged)
            raise

    def apply_trust_updates(self, plan: PromotionPlan, anchors: TrustAnchors) -> None:
        self._hook("trust:start")
        if plan.new_krl is not None:
            self._install_anchor(self.config.krl_path, plan.new_krl.canonical_bytes())
            change = {"kind": "krl", "sequence_number": plan.new_krl.sequence_number,
                      "revoked": len(plan.new_krl.revoked)}
            self.report.trust_changes.append(change)
            self._emit("krl_installed", **change)
            self._hook("trust:after_krl")
        if plan.new_key is not None:
            self._install_anchor(self.config.key_path, plan.new_key.canonical_bytes())
            change = {"kind": "rotation", "old": anchors.fingerprint.hex,
                      "new": fingerprint(plan.new_key).hex}
            self.report.trust_changes.append(change)
            self._emit("key_rotated", **change)
        self._hook("trust:done")

    # -- phase 3 ---------------------------------------------------------

    def phase_promote(self, plan: PromotionPlan) -> None:
        if not privilege.is_elevated(self.ctx):
            raise ContractViolation("promotion requires elevated privilege")
        self._hook("promote:start")
        for index, item in enumerate(plan.items):
            if index == plan.enabler_index:
                continue
            self._hook(f"promote:before_step:{index}")
            if self._is_current(item.entry):
                self.report.entries[index].status = SKIPPED
                self._emit("skipped_idempotent", entry=index,
                           destination=item.entry.destination_path)
            else:
                self._promote_item(index, item)
            self._hook(f"promote:after_step:{index}")
        self._hook("promote:done")


def run(config: EngineConfig, verify_only: bool = False, **kwargs) -> RunReport:
    return Engine(config, **kwargs).run(verify_only=verify_only)
