import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from src.affect.errors import StageError
from src.affect.pipeline import STAGES, AffectPipeline, empty_report, report_digest, run_pipeline
from src.affect.synth import CONTRADICTION_RULES, SyntheticSpec, synth_dataset
from src.utils.storage import read_json


@pytest.fixture(scope="module")
def full_run(small_corpus, make_config, tmp_path_factory):
    corpus_dir, _ = small_corpus
    config = make_config(corpus_dir, tmp_path_factory.mktemp("run") / "out")
    events = []
    report = run_pipeline(config, progress_callback=lambda stage, done, total: events.append(stage))
    return config, report, events


def test_all_stages_run_in_order(full_run):
    config, report, events = full_run
    assert report["stages"] == list(STAGES)
    assert list(dict.fromkeys(events)) == list(STAGES)
    assert read_json(Path(config.paths.output) / "report.json") == report


def test_report_has_fixed_schema(full_run):
    config, report, _ = full_run
    skeleton = empty_report(config)
    assert set(report) == set(skeleton)
    assert set(report["metrics"]) == set(skeleton["metrics"])
    assert set(report["loss"]) == set(skeleton["loss"])


def test_filter_removes_injected_contradictions(full_run, small_corpus):
    _, report, _ = full_run
    _, manifest = small_corpus
    counts = manifest["contradiction_counts"]
    assert report["filter_report"] == {
        "removed_happy_neg": counts["happy_negative_valence"],
        "removed_sad_pos": counts["sad_positive_valence"],
        "removed_neutral_highnorm": counts["neutral_high_norm"],
        "removed_invalid": counts["invalid"],
        "kept": manifest["total_frames"] - sum(counts.values()),
    }
    assert report["labels"]["excluded"] == sum(counts.values())


def test_valence_only_pseudo_labels(full_run):
    _, report, _ = full_run
    assert report["pseudo"] == "valence"
    assert report["labels"]["pseudo_valence"] > 0
    assert report["labels"]["pseudo_arousal"] == 0
    assert report["labels"]["soft_ex"] == 0


def test_stage_artifacts(full_run):
    config, report, _ = full_run
    out = Path(config.paths.output)
    assert report["audio"]["spectrograms"] == 2
    assert report["align"]["frames"] == 80
    assert len(list((out / "aligned" / "video000" / "faces").glob("*.png"))) == 40
    assert len(list((out / "aligned" / "video000" / "masks").glob("*.pgm"))) == 40

    pipeline = AffectPipeline(config)
    anchors = [pipeline.anchors(v) for v in pipeline.index.video_ids]
    assert all(t % config.forward_stride == 0 for ts in anchors for t in ts)
    predictions = read_json(out / "forward" / "predictions.json")["predictions"]
    assert len(predictions) == sum(len(ts) for ts in anchors) == report["forward"]["predictions"]
    assert all(len(p["output"]) == config.network.head_width for p in predictions)
    assert report["clips"]["count"] == len(predictions)
    assert read_json(out / "eval" / "metrics.json") == report["metrics"]


def tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_same_seed_is_byte_identical(full_run, small_corpus, make_config, tmp_path):
    config, report, _ = full_run
    corpus_dir, _ = small_corpus
    again = run_pipeline(make_config(corpus_dir, tmp_path / "again"))
    assert report_digest(again) == report_digest(report)
    assert tree_digest(tmp_path / "again") == tree_digest(Path(config.paths.output))


def test_stages_resume_from_artifacts(full_run, small_corpus, make_config, tmp_path):
    config, _, _ = full_run
    corpus_dir, _ = small_corpus
    split = make_config(corpus_dir, tmp_path / "split")
    run_pipeline(split, stages=("labels",))
    resumed = run_pipeline(split, stages=("audio", "align", "forward", "eval"))
    assert resumed["stages"] == ["audio", "align", "forward", "eval"]
    expected = (Path(config.paths.output) / "forward" / "predictions.json").read_bytes()
    assert (tmp_path / "split" / "forward" / "predictions.json").read_bytes() == expected


def test_unfiltered_run_keeps_raw_counts(small_corpus, make_config, tmp_path):
    corpus_dir, _ = small_corpus
    config = make_config(corpus_dir, tmp_path / "raw", filter=False, pseudo="none")
    report = run_pipeline(config, stages=("labels",))
    assert report["labels"]["excluded"] == 0
    for task in ("va", "ex", "au"):
        assert report["labels"][task] == report["raw_labels"][task]
    assert report["labels"]["pseudo_valence"] == 0
    assert report["filter_report"]["kept"] == report["labels"]["total"]


def test_soft_expression_policy(small_corpus, make_config, tmp_path):
    corpus_dir, _ = small_corpus
    report = run_pipeline(make_config(corpus_dir, tmp_path / "soft", pseudo="va+ex"), stages=("labels",))
    assert report["labels"]["pseudo_arousal"] == report["labels"]["pseudo_valence"]
    assert report["labels"]["soft_ex"] > 0


def test_missing_annotations_fail_the_labels_stage(small_corpus, make_config, tmp_path):
    corpus_dir, _ = small_corpus
    config = make_config(corpus_dir, tmp_path / "out")
    config.paths.annotations = str(tmp_path / "nowhere")
    with pytest.raises(StageError) as exc:
        run_pipeline(config)
    assert exc.value.stage == "parse"


def test_stage_without_its_inputs_fails(small_corpus, make_config, tmp_path):
    corpus_dir, _ = small_corpus
    with pytest.raises(StageError) as exc:
        run_pipeline(make_config(corpus_dir, tmp_path / "out"), stages=("forward",))
    assert exc.value.stage == "forward"


def test_unknown_stage_rejected(small_corpus, make_config, tmp_path):
    corpus_dir, _ = small_corpus
    with pytest.raises(ValueError):
        run_pipeline(make_config(corpus_dir, tmp_path / "out"), stages=("train",))


def test_full_corpus_runs_fast_and_reproducibly(acceptance_corpus, make_config, tmp_path):
    corpus_dir, manifest = acceptance_corpus
    first = make_config(corpus_dir, tmp_path / "first", write_clips=True, spectrogram_csv=True)
    start = time.perf_counter()
    report = run_pipeline(first)
    assert time.perf_counter() - start < 60.0
    assert report["videos"] == 10
    assert report["align"]["frames"] == manifest["total_frames"]
    assert report["labels"]["excluded"] == 137

    run_pipeline(make_config(corpus_dir, tmp_path / "second", write_clips=True, spectrogram_csv=True))
    assert tree_digest(tmp_path / "first") == tree_digest(tmp_path / "second")


def random_spec(rng) -> SyntheticSpec:
    n_videos = int(rng.integers(0, 3))
    frames = int(rng.integers(1, 16))
    coverage = {task: float(rng.choice([0.0, 1.0, rng.uniform()])) for task in ("VA", "EX", "AU")}
    contradictions = {}
    if n_videos * frames >= len(CONTRADICTION_RULES) and rng.random() < 0.5:
        coverage["VA"] = coverage["EX"] = 1.0
        contradictions = {rule: int(rng.integers(0, 2)) for rule in CONTRADICTION_RULES}
    return SyntheticSpec(
        n_videos=n_videos,
        frames_per_video=frames,
        coverage=coverage,
        contradictions=contradictions,
        au_rate=float(rng.uniform()),
        frame_size=112,
    )


@pytest.mark.parametrize("seed", range(50))
def test_pipeline_accepts_any_synthetic_corpus(seed, make_config, tmp_path):
    rng = np.random.default_rng(seed)
    synth_dataset(random_spec(rng), tmp_path / "data", rng)
    config = make_config(
        tmp_path / "data",
        tmp_path / "out",
        clip={"l": 2, "d": 1, "height": 56, "width": 56},
        pseudo=str(rng.choice(["none", "valence", "va", "va+ex"])),
        filter=bool(rng.random() < 0.5),
        stream_mode=str(rng.choice(["both", "visual", "aural"])),
    )
    report = run_pipeline(config)
    assert report["stages"] == list(STAGES)
    assert set(report) == set(empty_report(config))
