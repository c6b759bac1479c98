"""Adversarial race harness for the simulated backend.

An unprivileged adversary thread mutates sandbox paths while the engine
runs in the calling thread. Actions fire either at engine barrier points
(the engine blocks until the adversary has acted, which hits check/use
windows deterministically) or after seeded delays (free-running races).
After the run the sandbox is diffed against a pre-run snapshot and the
result is judged against what the vendor actually signed.

Script format (JSON)::

    {"scenario": {"entries": 3, "anchors_writable": true},
     "jitter_ms": 0.5,
     "actions": [
       {"kind": "replace_path", "path": "$pkg/bin/helper0", "payload": "evil",
        "at": "validate:after_open:0"},
       {"kind": "replace_anchor_path", "path": "$anchors/pubkey.doc",
        "payload": "@attacker_pubkey", "delay_ms": 3},
       {"kind": "tight_loop_replace", "path": "$pkg/bin/helper1",
        "payload": "@random:64", "duration_ms": 20},
       {"kind": "kill_engine", "at": "promote:after_step:1"}]}

Payloads are literal text, ``payload_b64``, or a reference: ``@attacker_pubkey``,
``@attacker_krl`` or ``@random:N``. Paths may use ``$pkg`` and ``$anchors``.
"""
from __future__ import annotations

import argparse
import base64
import json
import os
import posixpath
import queue
import random
import shutil
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import privilege
from .engine import Engine, EngineConfig, RunReport
from .errors import EngineKilled, PromoteError
from .keys import KrlDocument, PublicKeyDoc, fingerprint, public_doc
from .manifest import ENVELOPE_FILENAME, Manifest, parse_envelope
from .scenario import (ANCHORS_DIR, DEST_DIR, RUNTIME_FILES, FileSpec, Scenario,
                       enabler_update, sha256_hex, snapshot_tree, staging_label)
from .simfs import SERVICE_UID, SimBackend
from .trust import TrustAnchors, merge_krl, verify_envelope, verify_rotation
from .vendor import make_rotation

ACTION_KINDS = ("replace_path", "symlink_swap", "unlink", "replace_anchor_path",
                "kill_engine", "tight_loop_replace", "overwrite_in_place")

HELD = "HELD"
VIOLATED = "VIOLATED"

HOOK_TIMEOUT_S = 30.0
MAX_HANDOFFS = 1


class HarnessError(Exception):
    """The harness itself failed; says nothing about the engine."""


# -- scripts -------------------------------------------------------------------


@dataclass
class Action:
    kind: str
    path: Optional[str] = None
    payload: Any = None
    target: Optional[str] = None
    at: Optional[str] = None
    delay_ms: float = 0.0
    duration_ms: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise HarnessError(f"unknown action kind {self.kind!r}")
        if self.kind != "kill_engine" and not self.path:
            raise HarnessError(f"{self.kind} needs a path")
        if self.kind == "symlink_swap" and not self.target:
            raise HarnessError("symlink_swap needs a target")

    def to_obj(self) -> dict:
        obj = {k: v for k, v in asdict(self).items() if v not in (None, 0.0)}
        if isinstance(self.payload, bytes):
            obj.pop("payload")
            obj["payload_b64"] = base64.b64encode(self.payload).decode()
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "Action":
        obj = dict(obj)
        if "payload_b64" in obj:
            obj["payload"] = base64.b64decode(obj.pop("payload_b64"))
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise HarnessError(f"unknown action fields {sorted(unknown)}")
        return cls(**obj)


@dataclass
class AttackScript:
    actions: list[Action] = field(default_factory=list)
    scenario: dict = field(default_factory=dict)
    jitter_ms: float = 0.0

    def to_obj(self) -> dict:
        return {"actions": [a.to_obj() for a in self.actions], "scenario": self.scenario,
                "jitter_ms": self.jitter_ms}

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True)

    @classmethod
    def from_obj(cls, obj: dict) -> "AttackScript":
        return cls([Action.from_obj(a) for a in obj.get("actions", [])],
                   dict(obj.get("scenario", {})), float(obj.get("jitter_ms", 0.0)))

    @classmethod
    def load(cls, path: str) -> "AttackScript":
        with open(path, "rb") as fh:
            return cls.from_obj(json.load(fh))


@dataclass
class AttackReport:
    outcome: str
    exit_code: Optional[int]
    final_digests: dict[str, Optional[str]]
    verdict: str
    violations: list[str]
    actions: list[dict]
    seed: int
    error_code: Optional[str] = None
    stage: Optional[str] = None
    runs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


# -- scenario layouts ----------------------------------------------------------


def seeded_key(rng: random.Random) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))


@dataclass
class Setup:
    """A provisioned sandbox with one package, ready for an attack."""

    scenario: Scenario
    package: str
    files: list[FileSpec]
    attacker_key: Ed25519PrivateKey

    def config(self, **overrides) -> EngineConfig:
        return self.scenario.config(self.package, **overrides)


def build_setup(root: str, layout: dict, seed: int) -> Setup:
    """Build a sandbox from a script's ``scenario`` section.

    Keys and contents derive from ``seed``, so a seed reproduces the host.
    Keys: entries, size, anchors_writable, enabler_update, rotation,
    krl_update, signer ("vendor" | "attacker"), tamper ("none" | "signature"
    | "payload" | "candidate").
    """
    rng = random.Random(f"setup:{seed}")
    vendor_key = seeded_key(rng)
    attacker_key = seeded_key(rng)
    next_key = seeded_key(rng)
    scenario = Scenario(root, vendor_key, anchors_writable=bool(layout.get("anchors_writable")))
    size = int(layout.get("size", 256))
    files = []
    for i in range(int(layout.get("entries", 2))):
        body = f"helper {i} seed {seed}\n".encode() + rng.randbytes(max(0, size - 32))
        files.append(FileSpec(f"bin/helper{i}", body, f"{DEST_DIR}/helper{i}"))
    if layout.get("enabler_update"):
        files.insert(0, enabler_update(f"{seed}"))
    rotation = krl_update = None
    if layout.get("rotation"):
        rotation = make_rotation(vendor_key, public_doc(next_key))
    if layout.get("krl_update"):
        krl_update = KrlDocument(1, frozenset({fingerprint(public_doc(attacker_key))}))
    signer = attacker_key if layout.get("signer") == "attacker" else vendor_key
    package = scenario.add_package("pkg", files, rotation=rotation, krl_update=krl_update,
                                   signer=signer)
    tamper = layout.get("tamper", "none")
    if tamper != "none":
        _tamper(scenario, package, files, tamper, rng)
    return Setup(scenario, package, files, attacker_key)


def _tamper(scenario: Scenario, package: str, files: list[FileSpec], how: str,
            rng: random.Random) -> None:
    if how == "candidate" and files:
        path = scenario.physical(posixpath.join(package, rng.choice(files).candidate))
    else:
        path = scenario.physical(posixpath.join(package, ENVELOPE_FILENAME))
    data = bytearray(open(path, "rb").read())
    if how == "signature":
        env = json.loads(data)
        sig = bytearray(base64.b64decode(env["signature"]))
        sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
        env["signature"] = base64.b64encode(bytes(sig)).decode()
        data = bytearray(json.dumps(env, sort_keys=True, separators=(",", ":")).encode())
    else:
        data[rng.randrange(len(data))] ^= 1 << rng.randrange(8)
    with open(path, "wb") as fh:
        fh.write(data)


# -- authorization oracle ------------------------------------------------------


@dataclass
class Authorization:
    """What the vendor signed and what the anchors may legitimately become."""

    manifest: Optional[Manifest]
    anchors: dict[str, set[str]]

    def destinations(self) -> dict[str, tuple[str, Any]]:
        if self.manifest is None:
            return {}
        return {e.destination_path: (e.content_digest, e.target) for e in self.manifest.entries}

    def staging_digests(self, directory: str, label: str) -> set[str]:
        allowed = set()
        for dest, (digest, _) in self.destinations().items():
            if posixpath.split(dest) == (directory, label):
                allowed.add(digest)
        anchor = posixpath.join(directory, label)
        return allowed | self.anchors.get(anchor, set())


def authorize(fs: SimBackend, config: EngineConfig) -> Authorization:
    """Independently decide what this run may change, before the adversary acts."""
    key_path = posixpath.join(config.anchors_dir, "pubkey.doc")
    krl_path = posixpath.join(config.anchors_dir, "krl.json")
    key_raw = fs.read_physical(key_path)
    krl_raw = fs.read_physical(krl_path)
    allowed = {key_path: {sha256_hex(key_raw)} if key_raw is not None else set(),
               krl_path: {sha256_hex(krl_raw)} if krl_raw is not None else set()}
    try:
        anchors = TrustAnchors(PublicKeyDoc.from_bytes(key_raw),
                               KrlDocument.from_bytes(krl_raw) if krl_raw else KrlDocument())
        raw = fs.read_physical(posixpath.join(config.package_root, ENVELOPE_FILENAME))
        manifest = verify_envelope(parse_envelope(raw or b""), anchors)
    except (PromoteError, TypeError):
        return Authorization(None, allowed)
    krl = anchors.krl
    if manifest.krl_update is not None:
        try:
            krl = merge_krl(anchors.krl, manifest.krl_update)
            allowed[krl_path].add(sha256_hex(krl.canonical_bytes()))
        except PromoteError:
            pass
    if manifest.rotation is not None:
        try:
            new_key = verify_rotation(manifest.rotation, anchors)
            if fingerprint(new_key) not in krl.revoked:
                allowed[key_path].add(sha256_hex(new_key.canonical_bytes()))
        except PromoteError:
            pass
    return Authorization(manifest, allowed)


def _privileged(rec: dict) -> bool:
    return (rec["owner"] == 0 or rec["group"] == 0 or bool(rec["mode"] & 0o6000)
            or bool(rec["capabilities"]))


def _trusted_anchor(rec: dict) -> bool:
    return rec["kind"] == "file" and rec["owner"] == 0 and not rec["mode"] & 0o022


def service_writable(rec: Optional[dict]) -> bool:
    if rec is None:
        return False
    if rec["owner"] == SERVICE_UID and rec["mode"] & 0o200:
        return True
    return bool(rec["mode"] & 0o002)


def judge(before: dict[str, dict], after: dict[str, dict], auth: Authorization) -> list[str]:
    """Invariant checks over a sandbox diff. Returns violations (empty means HELD)."""
    violations = []
    dests = auth.destinations()

    def adversary_area(path: str) -> bool:
        parent = posixpath.dirname(path)
        return service_writable(before.get(parent)) or service_writable(after.get(parent))

    for path in sorted(set(before) | set(after)):
        b, a = before.get(path), after.get(path)
        if b == a or path in RUNTIME_FILES:
            continue
        if path in auth.anchors:
            # (c) whatever the next run would trust must be authorized.
            if a is not None and _trusted_anchor(a) and a["digest"] not in auth.anchors[path]:
                violations.append(f"trusted anchor {path} has unauthorized content")
            elif a is None and not adversary_area(path):
                violations.append(f"anchor {path} removed")
            continue
        if path in dests:
            digest, target = dests[path]
            if a is None:
                violations.append(f"destination {path} removed")
            elif a["kind"] != "file" or a.get("digest") != digest:
                violations.append(f"destination {path} holds unauthorized content "
                                  f"{a.get('digest')} (authorized {digest})")
            elif (a["owner"], a["group"], a["mode"]) != (target.owner_id, target.group_id,
                                                         target.mode) \
                    or a["capabilities"] != sorted(c.lower() for c in target.capabilities):
                violations.append(f"destination {path} has attributes the manifest did not grant")
            continue
        label = staging_label(path)
        if label is not None and a is not None and a["kind"] == "file" and \
                a["digest"] in auth.staging_digests(posixpath.dirname(path), label):
            continue
        if adversary_area(path):
            # (b) the adversary's own files may change, but never gain privilege.
            if a is not None and _privileged(a):
                violations.append(f"{path} in a service-writable directory is privileged")
            continue
        if label is not None and a is None:
            continue
        violations.append(f"unexpected change at {path}")
    return violations


# -- adversary -----------------------------------------------------------------


class Adversary(threading.Thread):
    """The unprivileged attacker: one thread, acting on sandbox paths only."""

    def __init__(self, script: AttackScript, fs: SimBackend, rng: random.Random,
                 substitutions: dict[str, str], payloads: dict[str, bytes]):
        super().__init__(name="adversary", daemon=True)
        self.script = script
        self.fs = fs
        self.rng = rng
        self.subs = substitutions
        self.payloads = payloads
        self.log: list[dict] = []
        self.requests: queue.Queue = queue.Queue()
        self.stop_event = threading.Event()
        self.kill_pending = threading.Event()
        self.error: Optional[BaseException] = None
        self.by_point: dict[str, list[Action]] = {}
        self.timed: list[Action] = []
        for action in script.actions:
            if action.at:
                self.by_point.setdefault(action.at, []).append(action)
            else:
                self.timed.append(action)
        self.timed.sort(key=lambda a: a.delay_ms)
        self.loops: list[tuple[Action, float]] = []
        self.t0 = time.monotonic()
        self._loop_counter = 0

    # -- path helpers ------------------------------------------------------

    def resolve(self, path: str) -> str:
        for key, value in self.subs.items():
            path = path.replace(key, value)
        return path

    def payload(self, action: Action, variant: int = 0) -> bytes:
        value = action.payload
        if isinstance(value, bytes):
            data = value
        elif value is None:
            data = b"adversary payload\n"
        elif value.startswith("@random:"):
            data = self.rng.randbytes(int(value.split(":", 1)[1]))
        elif value.startswith("@"):
            if value not in self.payloads:
                raise HarnessError(f"unknown payload reference {value}")
            data = self.payloads[value]
        else:
            data = value.encode()
        return data + (b"#%d" % variant if variant else b"")

    def check_contained(self, action: Action) -> None:
        """Refuse anything the service account could not do on a real host."""
        if action.kind == "kill_engine":
            return
        path = self.resolve(action.path)
        parent = posixpath.dirname(path)
        if action.kind == "overwrite_in_place":
            rec = self.fs.attributes_at(path)
            if rec is not None and not service_writable(rec):
                raise HarnessError(f"adversary cannot write {path} without privilege")
            return
        if not service_writable(self.fs.attributes_at(parent)):
            raise HarnessError(f"adversary cannot modify entries of {parent} without privilege")

    # -- actions ------------------------------------------------------------

    def _swap_in(self, path: str, make) -> None:
        phys = self.fs.physical(path)
        tmp = f"{phys}.adv{self._loop_counter}"
        self._loop_counter += 1
        make(tmp)
        os.rename(tmp, phys)

    def _write_new(self, data: bytes):
        def make(tmp):
            with open(tmp, "wb") as fh:
                fh.write(data)
        return make

    def perform(self, action: Action, variant: int = 0) -> None:
        record = {"t_ms": round((time.monotonic() - self.t0) * 1000, 3), "kind": action.kind,
                  "path": self.resolve(action.path) if action.path else None, "at": action.at}
        try:
            self.check_contained(action)
            path = record["path"]
            kind = action.kind
            if kind == "kill_engine":
                self.kill_pending.set()
            elif kind in ("replace_path", "replace_anchor_path", "tight_loop_replace"):
                self._swap_in(path, self._write_new(self.payload(action, variant)))
            elif kind == "symlink_swap":
                target = self.resolve(action.target)
                link_to = self.fs.physical(target) if target.startswith("/") else target
                self._swap_in(path, lambda tmp: os.symlink(link_to, tmp))
            elif kind == "unlink":
                os.unlink(self.fs.physical(path))
            elif kind == "overwrite_in_place":
                fd = os.open(self.fs.physical(path), os.O_WRONLY | os.O_TRUNC | os.O_NOFOLLOW)
                try:
                    os.write(fd, self.payload(action, variant))
                finally:
                    os.close(fd)
            record["result"] = "ok"
        except HarnessError:
            raise
        except OSError as exc:
            record["result"] = f"error: {exc.strerror or exc}"
        if variant <= 1:
            self.log.append(record)

    def _start(self, action: Action) -> None:
        if action.kind == "tight_loop_replace":
            self.perform(action, 1)
            self.loops.append((action, time.monotonic() + action.duration_ms / 1000))
        else:
            self.perform(action)

    def run(self) -> None:
        try:
            self._run()
        except BaseException as exc:  # surfaced by run_attack
            self.error = exc
            self.stop_event.set()
            while True:
                try:
                    _, ev = self.requests.get_nowait()
                    ev.set()
                except queue.Empty:
                    break

    def _run(self) -> None:
        pending = list(self.timed)
        variant = 2
        while not self.stop_event.is_set():
            busy = bool(self.loops)
            timeout = 0.0 if busy else 0.002 if pending else 0.05
            try:
                point, ev = self.requests.get(timeout=timeout) if timeout else \
                    self.requests.get_nowait()
            except queue.Empty:
                point = None
            if point is not None:
                for action in self.by_point.get(point, ()):
                    self._start(action)
                ev.set()
            elapsed = (time.monotonic() - self.t0) * 1000
            while pending and pending[0].delay_ms <= elapsed:
                self._start(pending.pop(0))
            now = time.monotonic()
            self.loops = [(a, end) for a, end in self.loops if end > now]
            for action, _ in self.loops:
                self.perform(action, variant)
                variant += 1

    # -- engine side ------------------------------------------------------------

    def on_hook(self, point: str, engine_rng: random.Random, jitter_ms: float) -> None:
        """Called from the engine thread at every barrier point."""
        if jitter_ms:
            time.sleep(engine_rng.uniform(0, jitter_ms) / 1000)
        if point in self.by_point and not self.stop_event.is_set():
            ev = threading.Event()
            self.requests.put((point, ev))
            if not ev.wait(HOOK_TIMEOUT_S):
                raise HarnessError(f"adversary did not release barrier {point}")
        if self.error is not None:
            raise HarnessError(f"adversary failed: {self.error}")
        if self.kill_pending.is_set():
            self.log.append({"t_ms": round((time.monotonic() - self.t0) * 1000, 3),
                             "kind": "engine_killed", "path": None, "at": point,
                             "result": "ok"})
            raise EngineKilled(point)


# -- attacks -------------------------------------------------------------------


def run_attack(script: AttackScript, config: EngineConfig, seed: int, *,
               authorization: Optional[Authorization] = None,
               payloads: Optional[dict[str, bytes]] = None) -> AttackReport:
    """Run the engine against ``script`` and judge the outcome."""
    if config.backend != privilege.SIM:
        raise HarnessError("attacks run against the simulated backend only")
    fs = SimBackend(config.sandbox, privilege.PrivilegeContext(privilege.SIM,
                                                               state=privilege.DROPPED))
    auth = authorization or authorize(fs, config)
    before = snapshot_tree(fs)
    rng = random.Random(f"adversary:{seed}")
    engine_rng = random.Random(f"engine:{seed}")
    subs = {"$pkg": config.package_root, "$anchors": config.anchors_dir}
    adversary = Adversary(script, fs, rng, subs, payloads or {})
    for action in script.actions:
        adversary.check_contained(action)

    handoffs: list[tuple[str, list[str]]] = []

    def hooks(point: str) -> None:
        adversary.on_hook(point, engine_rng, script.jitter_ms)

    def exec_fn(path: str, argv: list[str]) -> None:
        handoffs.append((path, argv))

    adversary.start()
    report: Optional[RunReport] = None
    outcome = None
    runs = 0
    try:
        current = config
        while True:
            runs += 1
            try:
                report = Engine(current, hooks=hooks, exec_fn=exec_fn).run()
            except EngineKilled:
                outcome = "killed"
                break
            if report.outcome != "handoff" or runs > MAX_HANDOFFS:
                break
            # The exec'd enabler is the same code in this harness; run it
            # again in-process with the resume marker, as the new process would.
            current = EngineConfig(**{**asdict(current), "self_updated": True})
    finally:
        adversary.stop_event.set()
        adversary.join(HOOK_TIMEOUT_S)
    if adversary.error is not None:
        raise HarnessError(f"adversary failed: {adversary.error}") from adversary.error

    after = snapshot_tree(fs)
    violations = judge(before, after, auth)
    if outcome is None:
        outcome = report.outcome if report.ok else f"aborted:{report.stage}:{report.error_code}"
    finals = {dest: (after.get(dest) or {}).get("digest") for dest in auth.destinations()}
    return AttackReport(outcome=outcome, exit_code=None if report is None or outcome == "killed"
                        else report.exit_code,
                        final_digests=finals, verdict=VIOLATED if violations else HELD,
                        violations=violations, actions=adversary.log, seed=seed,
                        error_code=None if report is None else report.error_code,
                        stage=None if report is None else report.stage, runs=runs)


def attack_payloads(setup: Setup) -> dict[str, bytes]:
    attacker = public_doc(setup.attacker_key)
    return {"@attacker_pubkey": attacker.canonical_bytes(),
            "@attacker_krl": KrlDocument(2**31, frozenset(
                {fingerprint(public_doc(setup.scenario.vendor_key))})).canonical_bytes()}


def run_script(script: AttackScript, seed: int, workdir: Optional[str] = None,
               keep: bool = False) -> AttackReport:
    """Build the script's scenario in a fresh sandbox and attack it."""
    root = tempfile.mkdtemp(prefix="promotectl-attack-", dir=workdir)
    try:
        setup = build_setup(root, script.scenario, seed)
        return run_attack(script, setup.config(), seed, payloads=attack_payloads(setup))
    finally:
        if not keep:
            shutil.rmtree(root, ignore_errors=True)


# -- fuzzing -------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    seed: int = 0
    max_entries: int = 4
    max_size: int = 2048
    kinds: tuple[str, ...] = ("payload_swap", "anchor_swap", "mixed", "kill", "tamper",
                              "self_update")
    weights: tuple[int, ...] = (8, 5, 3, 1, 1, 1)
    max_actions: int = 3
    workdir: Optional[str] = None


def _barrier_points(n: int, enabler: bool) -> list[str]:
    points = ["setup:start", "setup:anchors_opened", "setup:done", "validate:start",
              "validate:envelope_verified", "validate:done", "trust:start", "trust:done",
              "promote:start", "promote:done"]
    for i in range(n):
        points += [f"validate:before_open:{i}", f"validate:after_open:{i}",
                   f"promote:before_step:{i}", f"promote:after_stage:{i}",
                   f"promote:after_attrs:{i}", f"promote:after_step:{i}"]
    if enabler:
        points += ["self-update:start", "self-update:before_exec"]
    return points


def _trigger(rng: random.Random, points: list[str]) -> dict:
    if rng.random() < 0.75:
        return {"at": rng.choice(points)}
    return {"delay_ms": round(rng.uniform(0, 25), 3)}


def generate_trial(seed: int, gen: GeneratorConfig) -> AttackScript:
    """A reproducible (scenario, adversary) pair for ``seed``."""
    rng = random.Random(f"trial:{seed}")
    kind = rng.choices(gen.kinds, weights=gen.weights[:len(gen.kinds)])[0]
    n = rng.randint(1, gen.max_entries)
    scenario: dict = {"entries": n, "size": rng.randint(64, gen.max_size), "kind": kind}
    enabler = kind == "self_update"
    if enabler:
        scenario["enabler_update"] = True
    if kind in ("anchor_swap", "mixed"):
        scenario["anchors_writable"] = True
        scenario["rotation"] = rng.random() < 0.3
        scenario["krl_update"] = rng.random() < 0.3
        scenario["signer"] = "attacker" if rng.random() < 0.4 else "vendor"
    if kind == "tamper":
        scenario["tamper"] = rng.choice(["signature", "payload", "candidate"])
    total = n + (1 if enabler else 0)
    points = _barrier_points(total, enabler)
    candidates = [f"$pkg/bin/helper{i}" for i in range(n)]
    if enabler:
        candidates.append("$pkg/sbin/promotectl")
    actions = []

    def payload_action() -> dict:
        path = rng.choice(candidates + ["$pkg/" + ENVELOPE_FILENAME])
        op = rng.choice(["replace_path", "replace_path", "symlink_swap", "unlink",
                         "overwrite_in_place", "tight_loop_replace"])
        act = {"kind": op, "path": path, "payload": f"@random:{rng.randint(1, 512)}"}
        if op == "symlink_swap":
            act["target"] = rng.choice(["$anchors/pubkey.doc", "/usr/sbin/promotectl",
                                        "$pkg/bin/helper0"])
        if op == "tight_loop_replace":
            act["duration_ms"] = round(rng.uniform(1, 15), 3)
        return act

    def anchor_action() -> dict:
        path = rng.choice(["$anchors/pubkey.doc", "$anchors/pubkey.doc", "$anchors/krl.json"])
        payload = "@attacker_pubkey" if path.endswith("pubkey.doc") else "@attacker_krl"
        op = rng.choice(["replace_anchor_path", "replace_anchor_path", "symlink_swap",
                         "tight_loop_replace"])
        act = {"kind": op, "path": path, "payload": payload}
        if op == "symlink_swap":
            act["target"] = "$pkg/" + ENVELOPE_FILENAME
        if op == "tight_loop_replace":
            act["duration_ms"] = round(rng.uniform(1, 15), 3)
        return act

    for _ in range(rng.randint(1, gen.max_actions)):
        if kind in ("payload_swap", "self_update", "tamper"):
            act = payload_action()
        elif kind == "anchor_swap":
            act = anchor_action()
        elif kind == "mixed":
            act = rng.choice([payload_action, anchor_action])()
        else:
            act = {"kind": "kill_engine"}
        act.update(_trigger(rng, points))
        actions.append(act)
    if kind == "kill" and rng.random() < 0.5:
        actions.append({**payload_action(), **_trigger(rng, points)})
    return AttackScript.from_obj({"actions": actions, "scenario": scenario,
                                  "jitter_ms": rng.choice([0.0, 0.0, 0.2, 1.0])})


def trial_seed(gen: GeneratorConfig, index: int) -> int:
    return gen.seed * 1_000_003 + index


def replay(seed: int, gen: Optional[GeneratorConfig] = None) -> AttackReport:
    gen = gen or GeneratorConfig()
    return run_script(generate_trial(seed, gen), seed, gen.workdir)


def fuzz_campaign(n_trials: int, generator_config: Optional[GeneratorConfig] = None) -> dict:
    """Run ``n_trials`` randomized attacks; every trial is replayable from its seed."""
    gen = generator_config or GeneratorConfig()
    started = time.perf_counter()
    verdicts: Counter = Counter()
    outcomes: Counter = Counter()
    kinds: Counter = Counter()
    violated, errors = [], []
    for index in range(n_trials):
        seed = trial_seed(gen, index)
        script = generate_trial(seed, gen)
        kinds[script.scenario["kind"]] += 1
        try:
            report = run_script(script, seed, gen.workdir)
        except HarnessError as exc:
            errors.append({"seed": seed, "error": str(exc)})
            continue
        verdicts[report.verdict] += 1
        outcomes[report.outcome.split(":")[0]] += 1
        if report.verdict == VIOLATED:
            violated.append({"seed": seed, "violations": report.violations})
    return {"trials": n_trials, "held": verdicts[HELD], "violated": verdicts[VIOLATED],
            "harness_errors": errors, "violations": violated, "outcomes": dict(outcomes),
            "kinds": dict(kinds), "seed": gen.seed,
            "elapsed_s": round(time.perf_counter() - started, 3)}


# -- CLI -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promotectl-harness",
                                     description="Race the enabler against a scripted adversary.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one attack script")
    p.add_argument("--script", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir")
    p.add_argument("--keep", action="store_true", help="keep the sandbox for inspection")
    p = sub.add_parser("campaign", help="randomized attack campaign")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir")
    p = sub.add_parser("replay", help="replay one campaign trial by seed")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workdir")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = run_script(AttackScript.load(args.script), args.seed, args.workdir,
                                args.keep)
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0 if report.verdict == HELD else 1
        if args.command == "replay":
            report = replay(args.seed, GeneratorConfig(workdir=args.workdir))
            print(json.dumps(report.to_dict(), sort_keys=True))
            return 0 if report.verdict == HELD else 1
        summary = fuzz_campaign(args.trials, GeneratorConfig(seed=args.seed,
                                                             workdir=args.workdir))
        print(json.dumps(summary, sort_keys=True))
        return 0 if summary["violated"] == 0 and not summary["harness_errors"] else 1
    except (HarnessError, OSError, ValueError) as exc:
        print(f"promotectl-harness: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
