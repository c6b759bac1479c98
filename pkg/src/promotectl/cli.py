"""Host-side entry point for the enabler.

The machine-readable run report goes to stdout as JSON; a short human
summary goes to stderr (suppressed by ``--json``).
"""
from __future__ import annotations

import argparse
import json
import os
import posixpath
import sys
from typing import Optional

from . import privilege
from .engine import KEY_FILE, KRL_FILE, RESUME_FLAG, Engine, EngineConfig
from .errors import (EXIT_ANCHOR, EXIT_CONTRACT, EXIT_OK, EXIT_USAGE, MissingFileError,
                     PromoteError)
from .handles import RealBackend
from .simfs import SimBackend
from .trust import load_anchors

ENV_BACKEND = "PROMOTECTL_BACKEND"
ENV_SANDBOX = "PROMOTECTL_SANDBOX"
ENV_ENABLER = "PROMOTECTL_ENABLER_PATH"

# Kept when the real backend scrubs the inherited environment.
ENV_ALLOWLIST = ("LANG", "LC_ALL", "TZ", "SUDO_UID", "SUDO_GID", ENV_BACKEND)
SAFE_PATH = "/usr/sbin:/usr/bin:/sbin:/bin"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promotectl", description="Promote vendor-signed files to privileged status.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, package=True):
        if package:
            p.add_argument("--package", required=True, help="patch package directory")
        p.add_argument("--anchors", required=True, help="directory holding pubkey.doc and krl.json")
        p.add_argument("--backend", choices=privilege.BACKENDS,
                       help=f"privilege backend (default: ${ENV_BACKEND} or real)")
        p.add_argument("--sandbox", help=f"sandbox root for the sim backend (or ${ENV_SANDBOX})")
        p.add_argument("--json", action="store_true", help="machine-readable output only")

    for name in ("promote", "verify-only"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--allow-prefix", help="refuse destinations outside this prefix")
        p.add_argument("--enabler-path", help="installed path of this enabler")
        p.add_argument("--audit-log", help="audit log path (default: <anchors>/audit.log)")
        p.add_argument(RESUME_FLAG, dest="self_updated", action="store_true",
                       help=argparse.SUPPRESS)
    p = sub.add_parser("show-trust")
    common(p, package=False)
    return parser


def _backend(args) -> str:
    return args.backend or os.environ.get(ENV_BACKEND) or privilege.REAL


def _sandbox(args) -> Optional[str]:
    return args.sandbox or os.environ.get(ENV_SANDBOX)


def harden_process() -> None:
    """Scrub the inherited environment and descriptors (real backend only)."""
    kept = {k: os.environ[k] for k in ENV_ALLOWLIST if k in os.environ}
    os.environ.clear()
    os.environ.update(kept)
    os.environ["PATH"] = SAFE_PATH
    os.closerange(3, os.sysconf("SC_OPEN_MAX") if hasattr(os, "sysconf") else 1024)


def show_trust(anchors_dir: str, backend: str, sandbox: Optional[str] = None) -> dict:
    ctx = privilege.PrivilegeContext(backend, state=privilege.DROPPED)
    fs = RealBackend(ctx) if backend == privilege.REAL else SimBackend(sandbox, ctx)
    key_handle = fs.open_readonly(posixpath.join(anchors_dir, KEY_FILE))
    try:
        try:
            krl_handle = fs.open_readonly(posixpath.join(anchors_dir, KRL_FILE))
        except MissingFileError:
            krl_handle = None
        try:
            anchors = load_anchors(key_handle, krl_handle)
        finally:
            if krl_handle is not None:
                krl_handle.close()
    finally:
        key_handle.close()
    return {"fingerprint": anchors.fingerprint.hex, "algorithm_id": anchors.key.algorithm_id,
            "krl_sequence": anchors.krl.sequence_number, "revoked": len(anchors.krl.revoked),
            "revoked_fingerprints": sorted(fp.hex for fp in anchors.krl.revoked)}


def _summary(report) -> str:
    if report.ok:
        counts = {}
        for status in report.statuses():
            counts[status] = counts.get(status, 0) + 1
        parts = ", ".join(f"{n} {s}" for s, n in sorted(counts.items())) or "no entries"
        verb = "handed off to updated enabler" if report.outcome == "handoff" else "ok"
        return f"promotectl: {verb} ({parts})"
    return (f"promotectl: aborted in {report.stage}: {report.error_code}: {report.error} "
            f"(exit {report.exit_code})")


def main(argv: Optional[list[str]] = None, *, harden: bool = False, exec_fn=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    backend = _backend(args)
    sandbox = _sandbox(args)
    if backend == privilege.SIM and not sandbox:
        print("promotectl: the sim backend needs --sandbox", file=sys.stderr)
        return EXIT_USAGE
    if harden and backend == privilege.REAL:
        harden_process()

    if args.command == "show-trust":
        try:
            result = show_trust(args.anchors, backend, sandbox)
        except PromoteError as exc:
            print(json.dumps({"error": exc.code, "message": str(exc)}))
            if not args.json:
                print(f"promotectl: cannot read trust anchors: {exc}", file=sys.stderr)
            return EXIT_ANCHOR
        print(json.dumps(result, sort_keys=True))
        if not args.json:
            print(f"promotectl: key {result['fingerprint'][:16]}... KRL sequence "
                  f"{result['krl_sequence']}, {result['revoked']} revoked", file=sys.stderr)
        return EXIT_OK

    enabler_path = args.enabler_path or os.environ.get(ENV_ENABLER)
    if enabler_path is None and backend == privilege.REAL:
        enabler_path = os.path.abspath(sys.argv[0])
    try:
        config = EngineConfig(package_root=args.package, anchors_dir=args.anchors,
                              allow_prefix=args.allow_prefix, backend=backend,
                              self_updated=args.self_updated, sandbox=sandbox,
                              enabler_path=enabler_path, audit_log=args.audit_log, argv=argv)
    except PromoteError as exc:
        print(f"promotectl: {exc}", file=sys.stderr)
        return EXIT_USAGE if "absolute" in str(exc) else EXIT_CONTRACT
    report = Engine(config, exec_fn=exec_fn).run(verify_only=args.command == "verify-only")
    print(json.dumps(report.to_dict(), sort_keys=True))
    if not args.json:
        print(_summary(report), file=sys.stderr)
    return report.exit_code


def entrypoint() -> None:
    sys.exit(main(harden=True))


if __name__ == "__main__":
    entrypoint()
