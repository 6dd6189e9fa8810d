from pathlib import Path

import numpy as np
import pytest

import nahid
from nahid.raster import GrayImage, ProbMap

SCENARIOS = Path(nahid.__file__).parent / "scenarios"


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


def random_gray(rng, h, w) -> GrayImage:
    return GrayImage.from_array(rng.integers(0, 256, size=(h, w)))


def random_probmap(rng, h, w, c) -> ProbMap:
    raw = rng.random((h, w, c)).astype(np.float32) + 1e-3
    return ProbMap.from_array(raw / raw.sum(axis=2, keepdims=True))
