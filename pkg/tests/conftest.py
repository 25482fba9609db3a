import hashlib
import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
GRID_CONFIG = ROOT / "configs" / "table1_grid.json"
CACHE_ROOT = ROOT / ".acceptance_cache"

# modules whose code can change a simulation's output bytes
SIMULATION_MODULES = ("autograd", "model", "channel", "aggregation", "data", "metrics", "protocol", "harness")

# criterion number -> (passed, detail), filled in by test_acceptance.py
CRITERIA: dict = {}


def source_fingerprint(*extra: Path) -> str:
    """Hash of every package source file plus ``extra`` files.

    The simulator is deterministic, so a sweep computed by identical code
    from an identical config can be reused instead of recomputed.
    """
    h = hashlib.sha256()
    pkg = ROOT / "src" / "splitfed"
    files = [pkg / f"{m}.py" for m in SIMULATION_MODULES] + list(extra)
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def table1_dir() -> Path:
    return CACHE_ROOT / f"table1-{source_fingerprint(GRID_CONFIG)}"


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def grid_jobs() -> int:
    return int(os.environ.get("SPLITFED_JOBS", os.cpu_count() or 1))
