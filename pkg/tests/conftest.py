import os
from pathlib import Path

import numpy as np
import pytest

from idsr.data import ML100K_GENRES

ML100K_DIR = Path(os.environ.get("IDSR_ML100K", "/root/data/ml-100k"))


def write_lines(path, lines):
    path = Path(path)
    path.write_text("".join(line + "\n" for line in lines))
    return path


def item_line(item_id, flags):
    bits = ["0"] * len(ML100K_GENRES)
    for g in flags:
        bits[g] = "1"
    return f"{item_id}|Movie {item_id} (1995)|01-Jan-1995||http://x|" + "|".join(bits)


@pytest.fixture
def toy_ml100k(tmp_path):
    """Synthetic ml100k-format files: 12 users x 15 events over 20 items.

    Each user watches a contiguous run of items, so every item clears the
    5-event threshold and every user yields 6 windows.
    """
    rng = np.random.default_rng(7)
    lines = []
    for u in range(1, 13):
        start = rng.integers(0, 20)
        for k in range(15):
            item = (start + k) % 20 + 1
            lines.append(f"{u}\t{item}\t{rng.integers(1, 6)}\t{880000000 + 1000 * u + 37 * k}")
    rng.shuffle(lines)
    ratings = write_lines(tmp_path / "u.data", lines)
    write_lines(tmp_path / "u.item", [item_line(i, [1 + i % 18, 1 + (i * 7) % 18]) for i in range(1, 21)])
    return ratings


def ml100k_available():
    return (ML100K_DIR / "u.data").exists() and (ML100K_DIR / "u.item").exists()


needs_ml100k = pytest.mark.skipif(not ml100k_available(), reason=f"MovieLens 100K not found at {ML100K_DIR}")

# one line per acceptance criterion, echoed after the run
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[key])
