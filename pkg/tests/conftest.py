import time
from pathlib import Path

import pytest

from kanboost import cli

GOLDEN_DIR = Path(__file__).parent / "golden"

# (criterion, passed, detail) lines collected by test_acceptance.py; passed is None when skipped
ACCEPTANCE_LINES: list[tuple[str, bool | None, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


@pytest.fixture(scope="session")
def golden_run(tmp_path_factory):
    """Full synth-small profile: prepare + compare, run once per session."""
    root = tmp_path_factory.mktemp("golden")
    start = time.perf_counter()
    assert cli.main(["prepare", "--profile", "synth-small", "--out", str(root / "data")]) == 0
    assert cli.main(["compare", "--profile", "synth-small", "--data", str(root / "data"),
                     "--out", str(root / "compare")]) == 0
    elapsed = time.perf_counter() - start
    return {"root": root, "data": root / "data", "compare": root / "compare", "seconds": elapsed}


@pytest.fixture
def fast_config(tmp_path):
    """Override file shrinking training to a few epochs / rounds."""
    path = tmp_path / "fast.ini"
    path.write_text("[train]\nepochs = 3\n\n[gbt]\nn_estimators = 4\n")
    return path
