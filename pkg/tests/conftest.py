from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from stepverify import corpus, synthworld


@pytest.fixture(scope="session")
def small_world():
    """A small labeled world corpus shared by read-only tests."""
    config = synthworld.WorldConfig(seed=42, questions=40, solutions_per_question=5)
    sset, truth = synthworld.gen_corpus(config)
    return config, sset, truth


@pytest.fixture(scope="session")
def small_world_outcomes(small_world):
    _, sset, _ = small_world
    return corpus.label_set(sset)
