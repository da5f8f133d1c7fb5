import os
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]


def data_root() -> Path:
    env = os.environ.get("CFBENCH_DATA_DIR")
    return Path(env) if env else ROOT / "data"


@pytest.fixture(scope="session")
def movielens():
    from cfbench.dataset import load_movielens

    base = data_root() / "ml-100k"
    if not (base / "u.data").is_file():
        pytest.skip("MovieLens 100K files not present")
    return load_movielens(base / "u.data", base / "u.user")


@pytest.fixture
def write(tmp_path):
    """Write ``text`` to a file under tmp_path and return its path."""

    def _write(name, text):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p

    return _write


# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible even when output capture is on
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
