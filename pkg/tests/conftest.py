"""Shared fixtures: seeded generators, synthetic corpora and pipeline configs"""

import numpy as np
import pytest

from src.affect.synth import CONTRADICTION_RULES, SyntheticSpec, synth_dataset
from src.config import PathsConfig, PipelineConfig, TwoStreamConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_network() -> TwoStreamConfig:
    return TwoStreamConfig(base_channels=4, visual_blocks=1, aural_blocks=1, n_au=8)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two short videos with two injected contradictions per filter rule"""
    root = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(
        n_videos=2,
        frames_per_video=40,
        contradictions={rule: 2 for rule in CONTRADICTION_RULES},
        frame_size=112,
    )
    manifest = synth_dataset(spec, root / "data", np.random.default_rng(7))
    return root / "data", manifest


PLANTED_CONTRADICTIONS = dict(zip(CONTRADICTION_RULES, (35, 34, 34, 34)))


@pytest.fixture(scope="session")
def acceptance_corpus(tmp_path_factory):
    """Ten videos of 100 frames with 137 planted contradictions"""
    root = tmp_path_factory.mktemp("acceptance")
    spec = SyntheticSpec(n_videos=10, frames_per_video=100, contradictions=PLANTED_CONTRADICTIONS, frame_size=112)
    manifest = synth_dataset(spec, root / "data", np.random.default_rng(11))
    return root / "data", manifest


def build_config(corpus_dir, output_dir, **overrides) -> PipelineConfig:
    data = {
        "paths": PathsConfig.for_corpus(str(corpus_dir), str(output_dir)).model_dump(),
        "network": {"base_channels": 4, "visual_blocks": 1, "aural_blocks": 1},
        "clip": {"l": 4, "d": 2},
        "subspec_seconds": 1.0,
    }
    data.update(overrides)
    return PipelineConfig.model_validate(data)


@pytest.fixture(scope="session")
def make_config():
    """Factory for small-network configs over a corpus directory"""
    return build_config
