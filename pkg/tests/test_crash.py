"""A promotion killed with SIGKILL mid-flight, then re-run to completion."""
from __future__ import annotations

import json
import os
import signal
import subprocess
import sys

import pytest

from conftest import run
from promotectl.engine import PROMOTED, SKIPPED
from promotectl.scenario import DEST_DIR, helper, partial_files

CHILD = """
import json, sys, time
from promotectl.engine import Engine, EngineConfig
cfg = EngineConfig(**json.loads(sys.argv[1]))
pause_at = sys.argv[2]
def hooks(point):
    if point == pause_at:
        print("PAUSED", flush=True)
        time.sleep(60)
Engine(cfg, hooks=hooks).run()
"""


@pytest.mark.parametrize("pause_at", ["promote:after_stage:3", "promote:after_attrs:3",
                                      "trust:start", "validate:after_open:2"])
def test_sigkill_then_rerun(scenario, pause_at):
    files = [helper(i, data=os.urandom(4096)) for i in range(6)]
    pkg = scenario.add_package("p", files)
    cfg = scenario.config(pkg)
    child_cfg = {"package_root": cfg.package_root, "anchors_dir": cfg.anchors_dir,
                 "backend": cfg.backend, "sandbox": cfg.sandbox,
                 "enabler_path": cfg.enabler_path}
    proc = subprocess.Popen([sys.executable, "-c", CHILD, json.dumps(child_cfg), pause_at],
                            stdout=subprocess.PIPE, text=True)
    try:
        assert proc.stdout.readline().strip() == "PAUSED"
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait(10)
    assert proc.returncode == -signal.SIGKILL

    promoted_before = [scenario.digest_at(s.destination) == s.digest for s in files]
    expected_prefix = 3 if pause_at.startswith("promote") else 0
    assert promoted_before == [True] * expected_prefix + [False] * (6 - expected_prefix)
    leftovers = partial_files(scenario.snapshot())
    if pause_at.startswith("promote"):
        assert len(leftovers) == 1 and leftovers[0].startswith(f"{DEST_DIR}/.helper3.")
        # Nothing half-written is ever visible at a destination.
        assert scenario.attributes_at(files[3].destination) is None
    else:
        assert leftovers == []

    report = run(scenario, pkg)
    assert report.ok
    assert report.statuses() == [SKIPPED] * expected_prefix + [PROMOTED] * (6 - expected_prefix)
    assert partial_files(scenario.snapshot()) == []
    for spec in files:
        assert scenario.digest_at(spec.destination) == spec.digest
