import hashlib
import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "experiments" / "paper-desk.json"
CACHE = ROOT / ".cache"

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@dataclass
class DeskRun:
    directory: Path
    timing: dict
    cached: bool

    @property
    def reports(self):
        return self.directory / "reports"

    def report(self, name):
        return json.loads((self.reports / f"{name}.json").read_text())


def desk_key():
    """Hash of the desk config and the package sources; a change to either retrains."""
    h = hashlib.sha256(DESK_CONFIG.read_bytes())
    for path in sorted((ROOT / "src" / "attrib_sens").glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_run():
    """gen-data, train and a single-thread sweep of the desk config through the CLI.

    The result lives under .cache/ keyed by desk_key(), with the wall time of
    each step recorded when it was produced.
    """
    from attrib_sens import cli

    directory = CACHE / f"desk-{desk_key()}"
    timing_path = directory / "timing.json"
    if timing_path.exists():
        return DeskRun(directory, json.loads(timing_path.read_text()), cached=True)
    partial = directory.with_name(directory.name + ".partial")
    shutil.rmtree(partial, ignore_errors=True)
    steps = [
        ("gen-data", ["gen-data", "--config", str(DESK_CONFIG)]),
        ("train", ["train", "--config", str(DESK_CONFIG), "--model", "all"]),
        ("sweep", ["sweep", "--config", str(DESK_CONFIG), "--threads", "1"]),
    ]
    timing = {}
    for name, argv in steps:
        start = time.perf_counter()
        code = cli.main(argv + ["--out", str(partial)])
        timing[name] = time.perf_counter() - start
        assert code == 0, f"{name} failed with exit code {code}"
    start = time.perf_counter()
    assert cli.main(["report", "--in", str(partial / "reports"), "--out", str(partial / "summary")]) == 0
    timing["report"] = time.perf_counter() - start
    timing_path = partial / "timing.json"
    timing_path.write_text(json.dumps(timing, indent=2, sort_keys=True))
    partial.rename(directory)
    return DeskRun(directory, timing, cached=False)
