import numpy as np
import pytest

from src.affect.annotations import load_annotation_dir
from src.affect.audiodsp import read_wav
from src.affect.errors import OutputCollisionError
from src.affect.geometry import read_landmarks
from src.affect.labelfusion import filter_index
from src.affect.synth import CONTRADICTION_RULES, SyntheticSpec, canonical_landmarks, synth_dataset
from src.utils.images import read_rgb
from src.utils.storage import read_json


@pytest.fixture(scope="module")
def coverage_corpus(tmp_path_factory):
    spec = SyntheticSpec(n_videos=10, frames_per_video=100, frame_size=112)
    root = tmp_path_factory.mktemp("coverage") / "data"
    return root, synth_dataset(spec, root, np.random.default_rng(3))


def test_label_coverage_matches_request(coverage_corpus):
    root, manifest = coverage_corpus
    assert manifest["total_frames"] == 1000
    assert manifest["labeled"]["EX"] == 590
    assert manifest["labeled"]["VA"] == 750
    counts = load_annotation_dir(root / "annotations").counts
    assert counts.ex == 590
    assert counts.va == 750
    assert counts.au == 500


def test_consistent_corpus_survives_filtering(coverage_corpus):
    root, _ = coverage_corpus
    _, report, decisions = filter_index(load_annotation_dir(root / "annotations"))
    assert decisions == []
    assert report.kept == 1000


def test_corpus_layout(coverage_corpus):
    root, manifest = coverage_corpus
    assert manifest["videos"] == [f"video{i:03d}" for i in range(10)]
    assert read_json(root / "manifest.json") == manifest

    video = manifest["videos"][0]
    assert len(list((root / "frames" / video).glob("*.png"))) == 100
    assert read_rgb(root / "frames" / video / "00000.png").shape == (112, 112, 3)
    assert read_landmarks(root / "landmarks" / video / "00099.csv").shape == (68, 2)
    wave = read_wav(root / "audio" / f"{video}.wav")
    assert wave.sample_rate == 48000
    assert wave.samples.size == 160000


def test_injected_contradictions_are_listed(small_corpus):
    _, manifest = small_corpus
    assert manifest["contradiction_counts"] == {rule: 2 for rule in CONTRADICTION_RULES}
    assert len(manifest["contradictions"]) == 2 * len(CONTRADICTION_RULES)
    keys = [(c["video_id"], c["frame_index"]) for c in manifest["contradictions"]]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)


def test_zero_videos(tmp_path):
    manifest = synth_dataset(SyntheticSpec(n_videos=0), tmp_path / "empty", np.random.default_rng(0))
    assert manifest["total_frames"] == 0
    assert manifest["videos"] == []
    assert len(load_annotation_dir(tmp_path / "empty" / "annotations")) == 0


def test_refuses_non_empty_output(tmp_path):
    (tmp_path / "taken").mkdir()
    (tmp_path / "taken" / "file.txt").write_text("x")
    with pytest.raises(OutputCollisionError):
        synth_dataset(SyntheticSpec(n_videos=1, frames_per_video=2), tmp_path / "taken", np.random.default_rng(0))


def test_same_seed_same_annotations(tmp_path):
    spec = SyntheticSpec(n_videos=1, frames_per_video=12, frame_size=112)
    synth_dataset(spec, tmp_path / "a", np.random.default_rng(9))
    synth_dataset(spec, tmp_path / "b", np.random.default_rng(9))
    for task in ("VA", "EX", "AU"):
        first = (tmp_path / "a" / "annotations" / task / "video000.txt").read_text()
        assert first == (tmp_path / "b" / "annotations" / task / "video000.txt").read_text()


@pytest.mark.parametrize(
    "data",
    [
        {"coverage": {"EX": 1.5}},
        {"coverage": {"XX": 0.5}},
        {"contradictions": {"unknown_rule": 1}},
        {"n_videos": 1, "frames_per_video": 2, "contradictions": {CONTRADICTION_RULES[0]: 3}},
        {"va_gaussians": {"happiness": (0.5, 0.5, 0.0)}},
    ],
)
def test_spec_validation(data):
    with pytest.raises(ValueError):
        SyntheticSpec.model_validate(data)


def test_canonical_face_has_68_points():
    neutral = canonical_landmarks()
    smiling = canonical_landmarks((0.0, 3.0, 0.0))
    assert neutral.shape == (68, 2)
    assert smiling[48, 1] < neutral[48, 1]


def test_planted_contradictions_are_all_listed(acceptance_corpus):
    _, manifest = acceptance_corpus
    assert len(manifest["contradictions"]) == 137
    assert sum(manifest["contradiction_counts"].values()) == 137
    assert manifest["total_frames"] == 1000
