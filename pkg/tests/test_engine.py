from __future__ import annotations

import fcntl
import os
import posixpath

import pytest

from conftest import run
from promotectl.engine import (FAILED, PROMOTED, SKIPPED, VALIDATED, Engine, EngineConfig)
from promotectl.errors import (EXIT_ANCHOR, EXIT_CONTRACT, EXIT_DIGEST, EXIT_LOCK, EXIT_OK,
                               EXIT_POLICY, EXIT_PROMOTION, EXIT_REVOKED, EXIT_SIGNATURE,
                               EXIT_TRUST_UPDATE, ContractViolation, InjectedFailure)
from promotectl.keys import ED25519, KrlDocument, fingerprint, public_doc
from promotectl.manifest import ENVELOPE_FILENAME, TargetAttributes
from promotectl.scenario import (ANCHORS_DIR, DEST_DIR, SPOOL_DIR, FileSpec, Scenario, helper,
                                 partial_files)
from promotectl.vendor import generate_private_key, make_rotation


def helpers(n: int) -> list[FileSpec]:
    return [helper(i) for i in range(n)]


class TestHappyPath:
    def test_promotes_all_entries(self, scenario):
        files = helpers(3)
        pkg = scenario.add_package("p", files)
        report = run(scenario, pkg)
        assert report.ok and report.exit_code == EXIT_OK
        assert report.statuses() == [PROMOTED] * 3
        for spec in files:
            assert scenario.digest_at(spec.destination) == spec.digest
            attrs = scenario.attributes_at(spec.destination)
            assert (attrs["owner"], attrs["group"], attrs["mode"]) == (0, 0, 0o4755)
        assert partial_files(scenario.snapshot()) == []

    def test_second_run_is_idempotent(self, scenario):
        pkg = scenario.add_package("p", helpers(2))
        run(scenario, pkg)
        before = scenario.snapshot()
        report = run(scenario, pkg)
        assert report.ok and report.statuses() == [SKIPPED, SKIPPED]
        after = scenario.snapshot()
        for path in before:
            if path.startswith(DEST_DIR):
                assert before[path] == after[path]

    def test_capabilities_and_group(self, scenario):
        target = TargetAttributes(0, 50, 0o2750, ("cap_net_bind_service",))
        pkg = scenario.add_package("p", [helper(0, target=target)])
        assert run(scenario, pkg).ok
        attrs = scenario.attributes_at(f"{DEST_DIR}/helper0")
        assert attrs["group"] == 50 and attrs["mode"] == 0o2750
        assert attrs["capabilities"] == ["cap_net_bind_service"]

    def test_empty_manifest(self, scenario):
        pkg = scenario.add_package("p", [])
        report = run(scenario, pkg)
        assert report.ok and report.entries == []

    def test_verify_only_changes_nothing(self, scenario):
        pkg = scenario.add_package("p", helpers(2))
        before = scenario.snapshot()
        report = run(scenario, pkg, verify_only=True)
        assert report.ok and report.statuses() == [VALIDATED, VALIDATED]
        assert scenario.snapshot() == before

    def test_replaces_existing_destination(self, scenario):
        scenario.fs.provision_file(f"{DEST_DIR}/helper0", b"old version", mode=0o4755)
        spec = helper(0)
        pkg = scenario.add_package("p", [spec])
        assert run(scenario, pkg).statuses() == [PROMOTED]
        assert scenario.digest_at(spec.destination) == spec.digest

    def test_wrong_attributes_repromoted(self, scenario):
        spec = helper(0)
        scenario.fs.provision_file(spec.destination, spec.data, mode=0o755)
        pkg = scenario.add_package("p", [spec])
        assert run(scenario, pkg).statuses() == [PROMOTED]
        assert scenario.attributes_at(spec.destination)["mode"] == 0o4755


class TestPrivilegeDiscipline:
    def test_transition_sequence_and_audit_flags(self, scenario):
        pkg = scenario.add_package("p", helpers(2))
        engine = Engine(scenario.config(pkg))
        report = engine.run()
        assert report.ok
        assert engine.ctx.transition_names == ["acquire", "drop", "regain"]
        by_event = {}
        for event in engine.audit.events:
            by_event.setdefault(event["event"], []).append(event)
        assert all(e["detail"]["elevated"] is False for e in by_event["entry_validated"])
        assert by_event["envelope_verified"][0]["detail"]["elevated"] is False
        assert all(e["detail"]["elevated"] is True for e in by_event["promoted"])
        assert by_event["anchors_loaded"][0]["detail"]["elevated"] is True

    def test_audit_log_written(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        run(scenario, pkg)
        events = [e["event"] for e in scenario.audit_events()]
        assert events[0] == "start" and events[-1] == "run_complete"
        assert "privilege_dropped" in events and "privilege_regained" in events
        for line in scenario.audit_events():
            assert set(line) == {"ts", "stage", "event", "detail"}

    def test_no_candidate_or_anchor_opens_after_validation(self, scenario):
        pkg = scenario.add_package("p", helpers(3))
        engine = Engine(scenario.config(pkg))
        assert engine.run().ok
        late = [op for op in engine.backend.path_ops
                if op.stage in ("self-update", "trust", "promote")]
        assert late
        for op in late:
            assert not op.path.startswith(pkg), op
            assert op.path not in (scenario.key_path, scenario.krl_path) or op.op != "open", op

    def test_anchor_opens_happen_in_setup(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        engine = Engine(scenario.config(pkg))
        engine.run()
        stages = {op.stage for op in engine.backend.path_ops
                  if op.path == scenario.key_path and op.op == "open"}
        assert stages == {"setup"}


class TestRejections:
    def test_digest_mismatch(self, scenario):
        pkg = scenario.add_package("p", helpers(2))
        scenario.fs.write_unprivileged(f"{pkg}/bin/helper1", b"evil")
        before = scenario.snapshot()
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_DIGEST and report.stage == "validate"
        assert report.error_code == "digest-mismatch"
        assert {p: r for p, r in scenario.snapshot().items() if p.startswith(DEST_DIR)} == \
            {p: r for p, r in before.items() if p.startswith(DEST_DIR)}

    def test_candidate_missing(self, scenario):
        pkg = scenario.add_package("p", helpers(2))
        os.unlink(scenario.physical(f"{pkg}/bin/helper0"))
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_DIGEST and report.stage == "validate"

    def test_candidate_symlink(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        phys = scenario.physical(f"{pkg}/bin/helper0")
        os.rename(phys, phys + ".real")
        os.symlink(phys + ".real", phys)
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_DIGEST and report.error_code == "symlink-rejected"

    def test_other_signer(self, scenario):
        other = generate_private_key(ED25519)
        pkg = scenario.add_package("p", helpers(1), signer=other)
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_SIGNATURE
        assert scenario.attributes_at(f"{DEST_DIR}/helper0") is None

    def test_tampered_envelope(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        path = scenario.physical(f"{pkg}/{ENVELOPE_FILENAME}")
        data = bytearray(open(path, "rb").read())
        data[len(data) // 2] ^= 0x01
        open(path, "wb").write(bytes(data))
        report = run(scenario, pkg)
        assert not report.ok and report.stage == "validate"
        assert scenario.digest_at(f"{DEST_DIR}/helper0") is None

    def test_missing_envelope(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        os.unlink(scenario.physical(f"{pkg}/{ENVELOPE_FILENAME}"))
        report = run(scenario, pkg)
        assert report.error_code == "malformed-envelope" and not report.ok

    def test_missing_anchor_key(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        os.unlink(scenario.physical(scenario.key_path))
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_ANCHOR and report.stage == "setup"

    def test_anchor_not_root_owned(self, tmp_path):
        sc = Scenario(str(tmp_path / "h"))
        sc.fs.provision_file(sc.key_path, public_doc(sc.vendor_key).canonical_bytes(),
                             owner=1000)
        pkg = sc.add_package("p", helpers(1))
        report = run(sc, pkg)
        assert report.exit_code == EXIT_ANCHOR and report.error_code == "untrusted-anchor"

    def test_revoked_signer(self, tmp_path):
        key = generate_private_key(ED25519)
        other = generate_private_key(ED25519)
        sc = Scenario(str(tmp_path / "h"), key,
                      krl=KrlDocument(1, {fingerprint(public_doc(other))}))
        pkg = sc.add_package("p", helpers(1), signer=other)
        assert run(sc, pkg).exit_code == EXIT_REVOKED

    def test_trusted_key_revoked(self, tmp_path):
        key = generate_private_key(ED25519)
        sc = Scenario(str(tmp_path / "h"), key, krl=KrlDocument(1, {fingerprint(public_doc(key))}))
        pkg = sc.add_package("p", helpers(1))
        report = run(sc, pkg)
        assert report.exit_code == EXIT_REVOKED and report.stage == "setup"

    def test_allow_prefix(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        report = run(scenario, pkg, allow_prefix="/usr/local")
        assert report.exit_code == EXIT_POLICY

    def test_destination_inside_anchors(self, scenario):
        spec = FileSpec("bin/x", b"x", posixpath.join(ANCHORS_DIR, "pubkey.doc"))
        pkg = scenario.add_package("p", [spec])
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_POLICY
        assert scenario.trusted_key() == public_doc(scenario.vendor_key)

    def test_destination_dir_service_writable(self, scenario):
        spec = FileSpec("bin/x", b"x", f"{SPOOL_DIR}/x")
        pkg = scenario.add_package("p", [spec])
        assert run(scenario, pkg).exit_code == EXIT_POLICY

    def test_destination_dir_missing(self, scenario):
        spec = FileSpec("bin/x", b"x", "/opt/missing/x")
        pkg = scenario.add_package("p", [spec])
        assert run(scenario, pkg).exit_code == EXIT_POLICY

    def test_enabler_destination_must_match(self, scenario):
        spec = FileSpec("sbin/e", b"x", f"{DEST_DIR}/e", is_enabler=True)
        pkg = scenario.add_package("p", [spec])
        assert run(scenario, pkg).exit_code == EXIT_POLICY

    def test_lock_contention(self, scenario):
        pkg = scenario.add_package("p", helpers(1))
        run(scenario, pkg, verify_only=True)
        fd = os.open(scenario.physical(f"{ANCHORS_DIR}/.promotectl.lock"),
                     os.O_WRONLY | os.O_CREAT, 0o600)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            report = run(scenario, pkg)
            assert report.exit_code == EXIT_LOCK
            assert run(scenario, pkg, verify_only=True).ok
        finally:
            os.close(fd)
        assert run(scenario, pkg).ok

    def test_config_contract(self, scenario):
        with pytest.raises(ContractViolation):
            EngineConfig(package_root="relative", anchors_dir=ANCHORS_DIR,
                         sandbox=scenario.root)
        with pytest.raises(ContractViolation):
            EngineConfig(package_root="/p", anchors_dir=ANCHORS_DIR)
        assert EXIT_CONTRACT == ContractViolation("x").exit_code


class TestFailureInjection:
    def test_failure_mid_promotion_leaves_prefix(self, scenario):
        files = helpers(10)
        pkg = scenario.add_package("p", files)

        def hooks(point):
            if point == "promote:after_attrs:6":
                raise InjectedFailure("disk went away")

        report = run(scenario, pkg, hooks=hooks)
        assert report.exit_code == EXIT_PROMOTION and report.stage == "promote"
        assert report.statuses() == [PROMOTED] * 6 + [FAILED] + [VALIDATED] * 3
        for i, spec in enumerate(files):
            expected = spec.digest if i < 6 else None
            assert scenario.digest_at(spec.destination) == expected
        assert partial_files(scenario.snapshot()) == []
        report = run(scenario, pkg)
        assert report.statuses() == [SKIPPED] * 6 + [PROMOTED] * 4

    def test_in_place_write_after_validation_caught(self, scenario):
        files = helpers(2)
        pkg = scenario.add_package("p", files)

        def hooks(point):
            if point == "validate:done":
                with open(scenario.physical(f"{pkg}/bin/helper1"), "r+b") as fh:
                    fh.write(b"EVIL")

        report = run(scenario, pkg, hooks=hooks)
        assert report.exit_code == EXIT_DIGEST and report.stage == "promote"
        assert scenario.digest_at(files[1].destination) is None
        assert partial_files(scenario.snapshot()) == []

    def test_stale_staging_swept(self, scenario):
        files = helpers(1)
        pkg = scenario.add_package("p", files)
        stale = scenario.physical(f"{DEST_DIR}/.helper0.0123456789abcdef.tmp")
        open(stale, "wb").write(b"partial")
        engine = Engine(scenario.config(pkg))
        assert engine.run().ok
        assert not os.path.exists(stale)
        assert any(e["event"] == "stale_staging_removed" for e in engine.audit.events)


class TestTrustUpdates:
    def test_krl_update_installed(self, scenario):
        other = generate_private_key(ED25519)
        krl = KrlDocument(2, {fingerprint(public_doc(other))})
        pkg = scenario.add_package("p", helpers(1), krl_update=krl)
        report = run(scenario, pkg)
        assert report.ok and scenario.trusted_krl() == krl
        assert report.trust_changes[0]["kind"] == "krl"
        attrs = scenario.attributes_at(scenario.krl_path)
        assert (attrs["owner"], attrs["mode"]) == (0, 0o644)

    def test_stale_krl_rejected_before_anything_changes(self, tmp_path):
        key = generate_private_key(ED25519)
        sc = Scenario(str(tmp_path / "h"), key, krl=KrlDocument(5))
        pkg = sc.add_package("p", helpers(1), krl_update=KrlDocument(5))
        report = run(sc, pkg)
        assert report.exit_code == EXIT_TRUST_UPDATE and report.stage == "validate"
        assert sc.digest_at(f"{DEST_DIR}/helper0") is None

    def test_rotation_installed(self, scenario):
        k2 = generate_private_key(ED25519)
        rot = make_rotation(scenario.vendor_key, public_doc(k2))
        pkg = scenario.add_package("p", helpers(1), rotation=rot)
        report = run(scenario, pkg)
        assert report.ok and scenario.trusted_key() == public_doc(k2)

    def test_unauthorized_rotation(self, scenario):
        k2 = generate_private_key(ED25519)
        rot = make_rotation(k2, public_doc(k2))
        pkg = scenario.add_package("p", helpers(1), rotation=rot)
        report = run(scenario, pkg)
        assert report.exit_code == EXIT_TRUST_UPDATE
        assert scenario.trusted_key() == public_doc(scenario.vendor_key)

    def test_rotation_to_revoked_key(self, scenario):
        k2 = generate_private_key(ED25519)
        rot = make_rotation(scenario.vendor_key, public_doc(k2))
        krl = KrlDocument(1, {fingerprint(public_doc(k2))})
        pkg = scenario.add_package("p", helpers(1), rotation=rot, krl_update=krl)
        assert run(scenario, pkg).exit_code == EXIT_TRUST_UPDATE

    def test_trust_failure_between_krl_and_key(self, scenario):
        k2 = generate_private_key(ED25519)
        rot = make_rotation(scenario.vendor_key, public_doc(k2))
        krl = KrlDocument(1, {fingerprint(public_doc(generate_private_key(ED25519)))})
        pkg = scenario.add_package("p", helpers(1), rotation=rot, krl_update=krl)

        def hooks(point):
            if point == "trust:after_krl":
                raise InjectedFailure("crash")

        report = run(scenario, pkg, hooks=hooks)
        assert report.exit_code == EXIT_TRUST_UPDATE
        assert scenario.trusted_krl() == krl
        assert scenario.trusted_key() == public_doc(scenario.vendor_key)
        assert partial_files(scenario.snapshot()) == []
