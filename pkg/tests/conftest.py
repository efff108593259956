import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from batchinfer.io import generate_dataset  # noqa: E402


@pytest.fixture
def dataset(tmp_path):
    """Factory: dataset(size, records_per_file=...) -> (manifest, directory)."""

    def make(size: int, payload_bytes: int = 16, seed: int = 7, records_per_file: int = 100_000, name: str = "data"):
        out = tmp_path / name
        return generate_dataset(size, payload_bytes, seed, out, records_per_file), out

    return make


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
