from pathlib import Path

import pytest
import yaml

from trgl.data import mnist_available

HERE = Path(__file__).parent
_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_cfg():
    return yaml.safe_load((HERE / "acceptance.yaml").read_text())


@pytest.fixture
def record():
    """Store a criterion verdict for the end-of-run summary, then return it."""

    def _record(number: int, passed: bool, detail: str) -> bool:
        _RESULTS[number] = (bool(passed), detail)
        return bool(passed)

    return _record


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found (set TRGL_DATA_DIR)")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
