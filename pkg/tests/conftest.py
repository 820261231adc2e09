"""Shared fixtures: shipped configs, run caching, acceptance reporting."""

from __future__ import annotations

from pathlib import Path

import pytest

from vtrain.cli import load_config

REPO_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / "configs"

_acceptance_lines: list[tuple[int, str, bool]] = []


def record_criterion(number: int, title: str, passed: bool) -> None:
    _acceptance_lines.append((number, title, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed in sorted(_acceptance_lines):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} [{status}] {title}")


@pytest.fixture(scope="session")
def shipped_config():
    """Loader for the JSON configs shipped in configs/."""

    def load(name):
        return load_config(CONFIG_DIR / f"{name}.json")

    return load


@pytest.fixture(scope="session")
def run_cache(tmp_path_factory):
    """Session-wide store for expensive train/audit artifacts."""
    return {"dir": tmp_path_factory.mktemp("runs"), "results": {}}
