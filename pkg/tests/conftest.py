from pathlib import Path

import pytest

from miditune import corpus

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def toy_tracks():
    """Small deterministic corpus shared by fast tests."""
    return corpus.generate_tracks(seed=11, target_note_ons=600)
