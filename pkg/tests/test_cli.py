from __future__ import annotations

import json
import os
import subprocess

import pytest

from promotectl import cli
from promotectl.errors import (EXIT_ANCHOR, EXIT_DIGEST, EXIT_OK, EXIT_SIGNATURE, EXIT_USAGE)
from promotectl.keys import ED25519, KrlDocument, fingerprint, public_doc
from promotectl.scenario import Scenario, helper
from promotectl.vendor import generate_private_key


def call(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_promote_json_report(scenario, capsys):
    pkg = scenario.add_package("p", [helper(0)])
    code, out, err = call(scenario.cli_args("promote", pkg), capsys)
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["entries"][0]["status"] == "promoted"
    assert "promotectl: ok (1 promoted)" in err


def test_json_flag_silences_summary(scenario, capsys):
    pkg = scenario.add_package("p", [helper(0)])
    code, out, err = call(scenario.cli_args("promote", pkg) + ["--json"], capsys)
    assert code == EXIT_OK and err == "" and json.loads(out)["outcome"] == "success"


def test_verify_only_has_no_side_effects(scenario, capsys):
    pkg = scenario.add_package("p", [helper(0)])
    before = scenario.snapshot()
    code, out, _ = call(scenario.cli_args("verify-only", pkg), capsys)
    assert code == EXIT_OK and json.loads(out)["verify_only"] is True
    assert scenario.snapshot() == before


@pytest.mark.parametrize("mutate,expected", [
    ("candidate", EXIT_DIGEST),
    ("signer", EXIT_SIGNATURE),
    ("key", EXIT_ANCHOR),
])
def test_failure_exit_codes(scenario, capsys, mutate, expected):
    signer = generate_private_key(ED25519) if mutate == "signer" else None
    pkg = scenario.add_package("p", [helper(0)], signer=signer)
    if mutate == "candidate":
        scenario.fs.write_unprivileged(f"{pkg}/bin/helper0", b"x")
    if mutate == "key":
        os.unlink(scenario.physical(scenario.key_path))
    code, out, err = call(scenario.cli_args("promote", pkg), capsys)
    assert code == expected and json.loads(out)["exit_code"] == expected
    assert "aborted" in err


def test_show_trust(tmp_path, capsys):
    key = generate_private_key(ED25519)
    revoked = [fingerprint(public_doc(generate_private_key(ED25519))) for _ in range(2)]
    sc = Scenario(str(tmp_path / "h"), key, krl=KrlDocument(4, set(revoked)))
    code, out, err = call(sc.cli_args("show-trust"), capsys)
    assert code == EXIT_OK
    result = json.loads(out)
    assert result["fingerprint"] == fingerprint(public_doc(key)).hex
    assert result["krl_sequence"] == 4 and result["revoked"] == 2
    assert result["revoked_fingerprints"] == sorted(f.hex for f in revoked)
    assert "KRL sequence 4" in err


def test_show_trust_missing_key(scenario, capsys):
    os.unlink(scenario.physical(scenario.key_path))
    code, out, _ = call(scenario.cli_args("show-trust"), capsys)
    assert code == EXIT_ANCHOR and json.loads(out)["error"] == "missing-file"


@pytest.mark.parametrize("args", [
    [],
    ["promote"],
    ["promote", "--package", "/p"],
    ["frobnicate"],
    ["promote", "--package", "/p", "--anchors", "/a", "--backend", "magic"],
])
def test_usage_errors(args, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(args)
    assert exc.value.code == EXIT_USAGE


def test_sim_without_sandbox(capsys, monkeypatch):
    monkeypatch.delenv(cli.ENV_SANDBOX, raising=False)
    code, _, err = call(["promote", "--package", "/p", "--anchors", "/a", "--backend", "sim"],
                        capsys)
    assert code == EXIT_USAGE and "--sandbox" in err


def test_relative_package_is_usage_error(scenario, capsys):
    args = scenario.cli_args("promote", "relative/pkg")
    code, _, _ = call(args, capsys)
    assert code == EXIT_USAGE


def test_environment_configuration(scenario, capsys, monkeypatch):
    pkg = scenario.add_package("p", [helper(0)])
    monkeypatch.setenv(cli.ENV_BACKEND, "sim")
    monkeypatch.setenv(cli.ENV_SANDBOX, scenario.root)
    code, out, _ = call(["verify-only", "--package", pkg, "--anchors", "/etc/promotectl"],
                        capsys)
    assert code == EXIT_OK, out


def test_installed_entry_point(scenario):
    pkg = scenario.add_package("p", [helper(0)])
    result = subprocess.run(["promotectl", *scenario.cli_args("promote", pkg)],
                            capture_output=True, text=True)
    assert result.returncode == EXIT_OK, result.stderr
    assert json.loads(result.stdout)["entries"][0]["status"] == "promoted"
