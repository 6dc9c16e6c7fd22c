from __future__ import annotations

from pathlib import Path

import pytest

GOLDEN_DIR = Path(__file__).parent / "goldens"


@pytest.fixture
def golden():
    """Pin bytes on first generation, compare on every later run.

    Usage: assert raw == golden("name.bin", raw). The first run writes the
    file; subsequent runs return the committed bytes unchanged.
    """

    def _golden(name: str, current: bytes) -> bytes:
        path = GOLDEN_DIR / name
        if not path.exists():
            GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
            path.write_bytes(current)
        return path.read_bytes()

    return _golden
