"""Acquire, drop and regain elevated privilege.

The real backend uses POSIX saved-identity semantics: the effective ids are
lowered to an unprivileged account while the saved ids stay at the
superuser, so the process can later regain privilege without a second
process. The simulated backend only flips a checked flag, which lets the
whole engine run in CI without root.

A run must follow exactly ``elevated -> dropped -> elevated``. Anything else
is a defect in the caller and raises ContractViolation.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional

from .errors import ContractViolation, NotElevatedError, PrivilegeInsufficientError

REAL = "real"
SIM = "sim"
BACKENDS = (REAL, SIM)

ELEVATED = "elevated"
DROPPED = "dropped"

VALIDATION_COMPLETE = "validation-complete"

NOBODY_UID = 65534
NOBODY_GID = 65534


def default_drop_identity() -> tuple[int, int]:
    """Pick the unprivileged account to run validation as.

    Prefers the real (invoking) ids of a setuid launch, then the ids sudo
    records in the environment, then ``nobody``.
    """
    ruid, rgid = os.getuid(), os.getgid()
    if ruid != 0:
        return ruid, rgid
    try:
        return int(os.environ["SUDO_UID"]), int(os.environ["SUDO_GID"])
    except (KeyError, ValueError):
        return NOBODY_UID, NOBODY_GID


@dataclass
class PrivilegeContext:
    backend: str
    state: str = ELEVATED
    original_ids: dict = field(default_factory=dict)
    transitions: list = field(default_factory=list)
    drop_uid: Optional[int] = None
    drop_gid: Optional[int] = None

    def _log(self, transition: str) -> None:
        self.transitions.append((time.time(), transition))

    @property
    def transition_names(self) -> list[str]:
        return [name for _, name in self.transitions]


def acquire(backend: str, *, drop_uid: Optional[int] = None,
            drop_gid: Optional[int] = None) -> PrivilegeContext:
    if backend not in BACKENDS:
        raise ContractViolation(f"unknown backend {backend!r}")
    ctx = PrivilegeContext(backend)
    if backend == REAL:
        if os.geteuid() != 0:
            raise NotElevatedError(f"real backend requires euid 0, running as {os.geteuid()}")
        ruid, euid, suid = os.getresuid()
        rgid, egid, sgid = os.getresgid()
        ctx.original_ids = {"uid": [ruid, euid, suid], "gid": [rgid, egid, sgid],
                            "groups": os.getgroups()}
        if drop_uid is None or drop_gid is None:
            drop_uid, drop_gid = default_drop_identity()
        ctx.drop_uid, ctx.drop_gid = drop_uid, drop_gid
    ctx._log("acquire")
    return ctx


def drop(ctx: PrivilegeContext) -> None:
    if ctx.transition_names != ["acquire"]:
        raise ContractViolation(f"drop not permitted after {ctx.transition_names}")
    if ctx.backend == REAL:
        os.setgroups([])
        os.setresgid(-1, ctx.drop_gid, 0)
        os.setresuid(-1, ctx.drop_uid, 0)
    ctx.state = DROPPED
    ctx._log("drop")


def regain(ctx: PrivilegeContext, phase_token: str) -> None:
    if ctx.transition_names != ["acquire", "drop"]:
        raise ContractViolation(f"regain not permitted after {ctx.transition_names}")
    if phase_token != VALIDATION_COMPLETE:
        raise ContractViolation(f"regain requires completed validation, got {phase_token!r}")
    if ctx.backend == REAL:
        os.setresuid(-1, 0, -1)
        os.setresgid(-1, 0, -1)
        os.setgroups(ctx.original_ids.get("groups", []))
    ctx.state = ELEVATED
    ctx._log("regain")


def is_elevated(ctx: PrivilegeContext) -> bool:
    if ctx.backend == REAL:
        return ctx.state == ELEVATED and os.geteuid() == 0
    return ctx.state == ELEVATED


def require_elevated(ctx: PrivilegeContext, operation: str) -> None:
    if not is_elevated(ctx):
        raise PrivilegeInsufficientError(f"{operation} requires elevated privilege")


def check_transition_log(ctx: PrivilegeContext, *, complete: bool = True) -> None:
    """Post-run check of the transition sequence.

    ``complete=False`` accepts runs that legitimately stop after the drop
    (verify-only mode, or an abort during validation).
    """
    names = ctx.transition_names
    legal = [["acquire", "drop", "regain"]]
    if not complete:
        legal += [["acquire"], ["acquire", "drop"]]
    if names not in legal:
        raise ContractViolation(f"illegal privilege transition sequence {names}")
