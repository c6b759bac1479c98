from __future__ import annotations

import base64
import json

import pytest

from conftest import GOLDEN, golden_key, sha256sum, sha256_bytes
from promotectl.canonical import b64decode_strict, canonical_json, load_json_strict
from promotectl.errors import (DuplicateDestinationError, EmptyGrantError, EncodingError,
                               MalformedEnvelopeError, MultipleEnablerError,
                               NonCanonicalError, PathTraversalError, SchemaError,
                               UnsupportedAlgorithmError)
from promotectl.keys import fingerprint, public_doc, sign_bytes
from promotectl.manifest import (Manifest, ManifestEntry, SignedEnvelope, TargetAttributes,
                                 canonicalize, parse_envelope, parse_manifest)

ABC_DIGEST = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
# sha256sum tests/golden/payload.json
GOLDEN_PAYLOAD_SHA256 = "905c111adb992b5febc0b9bdca6df0940ac46df45072c0d70a65a9d0b8e894db"


def entry(dest="/opt/vendor/bin/helper", cand="bin/helper", **kw) -> ManifestEntry:
    target = kw.pop("target", TargetAttributes(0, 0, 0o4755))
    return ManifestEntry(cand, dest, target, kw.pop("digest", ABC_DIGEST), **kw)


def hand_canonical(value) -> str:
    """A minimal canonical-JSON writer for ASCII data, written independently of json.dumps."""
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        assert value.isascii() and '"' not in value and "\\" not in value
        return '"' + value + '"'
    if isinstance(value, list):
        return "[" + ",".join(hand_canonical(v) for v in value) + "]"
    items = sorted(value.items())
    return "{" + ",".join(f'"{k}":{hand_canonical(v)}' for k, v in items) + "}"


class TestCanonicalize:
    def test_empty_manifest_fixed_bytes(self):
        assert canonicalize(Manifest()) == b'{"entries":[],"format_version":1}'

    def test_field_order_does_not_matter(self):
        a = TargetAttributes(owner_id=0, group_id=0, mode=0o4755)
        b = TargetAttributes(mode=0o4755, group_id=0, owner_id=0)
        m1 = Manifest((ManifestEntry("bin/x", "/opt/x", a, ABC_DIGEST),))
        m2 = Manifest(entries=(ManifestEntry(content_digest=ABC_DIGEST, target=b,
                                             destination_path="/opt/x",
                                             candidate_path="bin/x"),))
        assert canonicalize(m1) == canonicalize(m2)

    def test_one_entry_matches_independent_serializer_and_hash(self, tmp_path):
        m = Manifest((entry(target=TargetAttributes(0, 0, 0o4755, ("cap_net_raw",))),))
        logical = {"format_version": 1, "entries": [{
            "candidate_path": "bin/helper", "destination_path": "/opt/vendor/bin/helper",
            "content_digest": ABC_DIGEST, "is_enabler": False,
            "target": {"owner_id": 0, "group_id": 0, "mode": 2541,
                       "capabilities": ["cap_net_raw"]}}]}
        expected = hand_canonical(logical).encode()
        assert canonicalize(m) == expected
        out = tmp_path / "payload"
        out.write_bytes(canonicalize(m))
        assert sha256sum(out) == GOLDEN_PAYLOAD_SHA256
        assert (GOLDEN / "payload.json").read_bytes() == expected

    def test_non_representable_value(self):
        with pytest.raises(EncodingError):
            canonical_json({"a": 1.5})
        with pytest.raises(EncodingError):
            canonical_json({1: "a"})

    def test_utf8_output(self):
        assert canonical_json({"b": "é", "a": [1, True, None]}) == \
            '{"a":[1,true,null],"b":"é"}'.encode()


class TestParseEnvelope:
    def test_golden_envelope_round_trip(self):
        raw = (GOLDEN / "manifest.sig.json").read_bytes()
        env = parse_envelope(raw)
        assert env.payload == (GOLDEN / "payload.json").read_bytes()
        assert env.signature == (GOLDEN / "signature.bin").read_bytes()
        assert env.signer_fingerprint == fingerprint(public_doc(golden_key()))
        assert env.algorithm_id == "ed25519"
        assert env.to_bytes() == raw

    def test_fresh_signature_is_bit_exact(self):
        payload = (GOLDEN / "payload.json").read_bytes()
        key = golden_key()
        env = SignedEnvelope(payload, sign_bytes(key, payload), fingerprint(public_doc(key)),
                             "ed25519")
        assert env.to_bytes() == (GOLDEN / "manifest.sig.json").read_bytes()

    @pytest.mark.parametrize("raw", [b"", b"\x00\xff", b"[]", b"{}", b'{"payload":"x"}',
                                     b"not json", b'{"algorithm_id":"ed25519"'])
    def test_malformed(self, raw):
        with pytest.raises(MalformedEnvelopeError):
            parse_envelope(raw)

    def test_unknown_algorithm(self):
        obj = json.loads((GOLDEN / "manifest.sig.json").read_bytes())
        obj["algorithm_id"] = "none"
        with pytest.raises(UnsupportedAlgorithmError):
            parse_envelope(json.dumps(obj).encode())

    def test_payload_not_parsed(self):
        obj = json.loads((GOLDEN / "manifest.sig.json").read_bytes())
        obj["payload"] = base64.b64encode(b"garbage, not a manifest").decode()
        assert parse_envelope(json.dumps(obj).encode()).payload == b"garbage, not a manifest"

    def test_bad_fingerprint_and_base64(self):
        obj = json.loads((GOLDEN / "manifest.sig.json").read_bytes())
        for field, value in [("signer_fingerprint", "AB" * 32), ("signer_fingerprint", "ab"),
                             ("signature", "!!!"), ("payload", "eyJ=")]:
            bad = dict(obj, **{field: value})
            with pytest.raises(MalformedEnvelopeError):
                parse_envelope(json.dumps(bad).encode())


class TestParseManifest:
    def test_empty(self):
        m = parse_manifest(b'{"entries":[],"format_version":1}')
        assert m.entries == () and m.rotation is None and m.krl_update is None

    def test_golden(self):
        m = parse_manifest((GOLDEN / "payload.json").read_bytes())
        (e,) = m.entries
        assert e.content_digest == sha256_bytes((GOLDEN / "helper.bin").read_bytes())
        assert e.target == TargetAttributes(0, 0, 0o4755, ("cap_net_raw",))

    def test_duplicate_destination(self):
        obj = {"entries": [entry().to_obj(), entry(cand="bin/other").to_obj()],
               "format_version": 1}
        with pytest.raises(DuplicateDestinationError):
            parse_manifest(canonical_json(obj))

    def test_multiple_enablers(self):
        obj = {"entries": [entry("/a/b", is_enabler=True).to_obj(),
                           entry("/a/c", is_enabler=True).to_obj()], "format_version": 1}
        with pytest.raises(MultipleEnablerError):
            parse_manifest(canonical_json(obj))

    @pytest.mark.parametrize("cand", ["../../etc/shadow", "a/../../b", "/etc/shadow", "a/./b",
                                      "a//b", "", "."])
    def test_candidate_traversal(self, cand):
        obj = {"entries": [dict(entry().to_obj(), candidate_path=cand)], "format_version": 1}
        with pytest.raises((PathTraversalError, SchemaError)):
            parse_manifest(canonical_json(obj))

    @pytest.mark.parametrize("dest", ["relative/x", "/a/../b", "/a//b", "//a", "/", "/a/",
                                      "/a/./b"])
    def test_destination_not_normalized(self, dest):
        with pytest.raises((PathTraversalError, SchemaError)):
            entry(dest=dest)

    def test_non_canonical_rejected(self):
        payload = (GOLDEN / "payload.json").read_bytes()
        spaced = json.dumps(json.loads(payload), sort_keys=True).encode()
        assert spaced != payload
        with pytest.raises(NonCanonicalError):
            parse_manifest(spaced)
        reordered = json.dumps(json.loads(payload), separators=(",", ":")).encode()
        if reordered != payload:
            with pytest.raises(NonCanonicalError):
                parse_manifest(reordered)

    @pytest.mark.parametrize("payload", [
        b'{"entries":[],"format_version":2}',
        b'{"entries":[],"format_version":1.0}',
        b'{"entries":[],"format_version":true}',
        b'{"entries":[],"entries":[],"format_version":1}',
        b'{"entries":[],"extra":1,"format_version":1}',
        b'{"entries":{},"format_version":1}',
        b'{"format_version":1}',
    ])
    def test_schema_violations(self, payload):
        with pytest.raises(SchemaError):
            parse_manifest(payload)


class TestTargetAttributes:
    def test_grants_nothing_rejected(self):
        with pytest.raises(EmptyGrantError):
            TargetAttributes(1000, 1000, 0o755)

    @pytest.mark.parametrize("attrs", [(0, 1000, 0o755), (1000, 0, 0o750), (1000, 1000, 0o4755),
                                       (1000, 1000, 0o2755)])
    def test_grants(self, attrs):
        assert TargetAttributes(*attrs).grants_privilege()

    def test_capability_only_grant(self):
        assert TargetAttributes(1000, 1000, 0o755, ("cap_net_bind_service",)).grants_privilege()

    @pytest.mark.parametrize("mode", [-1, 0o10000, True])
    def test_mode_range(self, mode):
        with pytest.raises(SchemaError):
            TargetAttributes(0, 0, mode)

    @pytest.mark.parametrize("caps", [("",), ("cap net",), ("cap_é",), "cap_net_raw"])
    def test_capability_tokens(self, caps):
        with pytest.raises(SchemaError):
            TargetAttributes(0, 0, 0o755, caps)

    def test_digest_format(self):
        with pytest.raises(SchemaError):
            entry(digest=ABC_DIGEST.upper())
        with pytest.raises(SchemaError):
            entry(digest=ABC_DIGEST[:-1])


class TestStrictJson:
    @pytest.mark.parametrize("raw", [b"NaN", b'{"a":1e3}', b'{"a":Infinity}', b"\xff",
                                     b'{"a":1,"a":2}'])
    def test_rejects(self, raw):
        with pytest.raises(SchemaError):
            load_json_strict(raw)

    def test_base64_canonical_only(self):
        assert b64decode_strict("YWJj", "x") == b"abc"
        for text in ["YWJj\n", "YW Jj", "YWI=x", "YWJ="]:
            with pytest.raises(SchemaError):
                b64decode_strict(text, "x")
