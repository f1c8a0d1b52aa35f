from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lumaforge.fixtures import FixtureCorpus, build_fixture_corpus
from lumaforge.imagecore import RasterImage
from lumaforge.sampler import SeverityConfig


@pytest.fixture(scope="session")
def severity_config() -> SeverityConfig:
    return SeverityConfig.load()


@pytest.fixture
def corpus(tmp_path: Path) -> FixtureCorpus:
    return build_fixture_corpus(tmp_path / "data", n_images=20, seed=0)


@pytest.fixture
def small_corpus(tmp_path: Path) -> FixtureCorpus:
    return build_fixture_corpus(tmp_path / "data", n_images=3, seed=1)


@pytest.fixture
def textured() -> RasterImage:
    rng = np.random.default_rng(42)
    return RasterImage(rng.uniform(0.05, 0.95, size=(24, 32, 3)))
