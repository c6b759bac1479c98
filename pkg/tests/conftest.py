from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from promotectl import privilege
from promotectl.engine import Engine
from promotectl.scenario import Scenario
from promotectl.simfs import SimBackend

GOLDEN = Path(__file__).parent / "golden"

# RFC 8032 section 7.1, test 1 secret key.
GOLDEN_SEED = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")


def golden_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(GOLDEN_SEED)


def sha256sum(path) -> str:
    """Digest from the coreutils tool, independent of this package."""
    out = subprocess.run(["sha256sum", str(path)], check=True, capture_output=True, text=True)
    return out.stdout.split()[0]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def run(scenario: Scenario, package: str, verify_only: bool = False, **kwargs):
    hooks = kwargs.pop("hooks", None)
    exec_fn = kwargs.pop("exec_fn", None)
    engine = Engine(scenario.config(package, **kwargs), hooks=hooks, exec_fn=exec_fn)
    return engine.run(verify_only=verify_only)


@pytest.fixture
def scenario(tmp_path) -> Scenario:
    return Scenario(str(tmp_path / "host"))


@pytest.fixture
def sim(tmp_path) -> SimBackend:
    root = tmp_path / "sandbox"
    root.mkdir()
    return SimBackend(str(root), privilege.acquire(privilege.SIM))


@pytest.fixture
def have_openssl():
    if shutil.which("openssl") is None:
        pytest.skip("openssl not installed")


def is_root() -> bool:
    return os.geteuid() == 0
