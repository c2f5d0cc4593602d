"""Stage-by-stage pipeline runner

Every stage reads its inputs from the configured paths or from artifacts of
earlier stages under the output directory, so single stages can be rerun from
the command line. All artifacts are written atomically.

Output layout:

    labels/   index.json, filter_report.json, decisions.json, histograms.{json,txt}
    audio/    <video>.mels (and <video>.csv)
    aligned/  <video>/faces/<frame>.png, <video>/masks/<frame>.pgm, <video>/transforms.json
    clips/    index.json (and <video>/<frame>.{clp,json})
    forward/  weights.{json,bin}, predictions.json
    eval/     metrics.json
    report.json
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..config import PipelineConfig
from ..utils.images import read_rgb, write_pgm, write_png_rgb
from ..utils.storage import atomic_write_bytes, atomic_write_text, dump_json, read_json, write_json
from .annotations import EXPRESSION_NAMES, DatasetIndex, FrameRecord, ValenceArousal, build_dataset_index, load_annotation_dir
from .audiodsp import (
    MelSpectrogram,
    decode_spectrogram,
    encode_spectrogram,
    extract_subspectrogram,
    mel_spectrogram,
    read_wav,
    resample,
    spectrogram_csv,
)
from .clipper import Clip, FrameStore, augment_clip, sample_clip, with_mask_mode, write_clip
from .errors import AffectError, AnnotationFormatError, StageError
from .geometry import (
    ALIGNED_SIZE,
    DEFAULT_TEMPLATE,
    FACE_CONTOURS,
    MaskSpec,
    align_face,
    estimate_similarity,
    five_points_from_68,
    read_landmarks,
    render_mask,
)
from .labelfusion import (
    FilterReport,
    apply_pseudo_policy,
    build_va_histograms,
    filter_index,
    histogram_summary,
    histogram_text_grid,
)
from .metrics import BatchPredictions, BatchTargets, evaluation_report, multitask_loss
from .netkernels import count_params, init_weights, load_weights, save_weights, two_stream_forward

logger = logging.getLogger(__name__)

STAGES = ("labels", "audio", "align", "clips", "forward", "eval")

ProgressCallback = Callable[[str, int, int], None]


def record_to_dict(r: FrameRecord) -> Dict[str, Any]:
    return {
        "frame_index": r.frame_index,
        "va": None if r.va is None else [r.va.valence, r.va.arousal],
        "ex": r.ex,
        "au": None if r.au is None else list(r.au),
        "soft_ex": None if r.soft_ex is None else list(r.soft_ex),
        "pseudo_va": None if r.pseudo_va is None else [r.pseudo_va.valence, r.pseudo_va.arousal],
        "excluded": r.excluded,
        "invalid": sorted(r.invalid),
    }


def record_from_dict(video_id: str, d: Dict[str, Any]) -> FrameRecord:
    return FrameRecord(
        video_id=video_id,
        frame_index=int(d["frame_index"]),
        va=None if d["va"] is None else ValenceArousal(*d["va"]),
        ex=d["ex"],
        au=None if d["au"] is None else tuple(d["au"]),
        soft_ex=None if d["soft_ex"] is None else tuple(d["soft_ex"]),
        pseudo_va=None if d["pseudo_va"] is None else ValenceArousal(*d["pseudo_va"]),
        excluded=bool(d["excluded"]),
        invalid=frozenset(d.get("invalid", ())),
    )


def index_to_json(index: DatasetIndex) -> Dict[str, Any]:
    return {
        "counts": index.counts.as_dict(),
        "videos": {vid: [record_to_dict(r) for r in records] for vid, records in index.videos},
    }


def index_from_json(data: Dict[str, Any]) -> DatasetIndex:
    return build_dataset_index(
        record_from_dict(vid, d) for vid, records in sorted(data["videos"].items()) for d in records
    )


def empty_report(config: PipelineConfig) -> Dict[str, Any]:
    """Report skeleton; every key is present even when a stage did not run"""
    return {
        "seed": config.seed,
        "pseudo": config.pseudo,
        "filter": config.filter,
        "bins": config.bins,
        "stream_mode": config.stream_mode,
        "use_mask": config.mask.use_mask,
        "stages": [],
        "videos": 0,
        "raw_labels": {"va": 0, "ex": 0, "au": 0},
        "filter_report": FilterReport().model_dump(),
        "labels": {
            "total": 0,
            "va": 0,
            "ex": 0,
            "au": 0,
            "excluded": 0,
            "pseudo_valence": 0,
            "pseudo_arousal": 0,
            "soft_ex": 0,
        },
        "histogram_totals": {name: 0 for name in EXPRESSION_NAMES},
        "audio": {"spectrograms": 0, "columns": 0},
        "align": {"frames": 0, "mean_residual": 0.0},
        "clips": {"count": 0},
        "forward": {"predictions": 0, "parameters": count_params(config.network)},
        "loss": {"l_ex": 0.0, "l_au": 0.0, "l_va": 0.0, "n_ex": 0, "n_au": 0, "n_v": 0, "n_a": 0, "total": 0.0},
        "metrics": evaluation_report(
            BatchPredictions.from_matrix(np.zeros((0, config.network.head_width)), config.network.n_au),
            BatchTargets.from_records([], config.network.n_au),
        ),
    }


class AffectPipeline:
    """Runs the pipeline stages for one configuration"""

    def __init__(self, config: PipelineConfig, progress_callback: Optional[ProgressCallback] = None):
        self.config = config
        self.out = Path(config.paths.output)
        self.progress_callback = progress_callback
        self.report = empty_report(config)
        self._index: Optional[DatasetIndex] = None
        self._spectrograms: Dict[str, MelSpectrogram] = {}
        self._stores: Dict[str, FrameStore] = {}

    def _progress(self, stage: str, done: int, total: int) -> None:
        if self.progress_callback:
            self.progress_callback(stage, done, total)

    def _map_videos(self, fn: Callable[[str], Any], video_ids: Sequence[str]) -> List[Any]:
        """Apply fn per video on a bounded worker pool, results in video order"""
        if self.config.jobs > 1 and len(video_ids) > 1:
            with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
                return list(pool.map(fn, video_ids))
        return [fn(v) for v in video_ids]

    @property
    def index(self) -> DatasetIndex:
        if self._index is None:
            path = self.out / "labels" / "index.json"
            if not path.exists():
                raise AffectError(f"missing {path}; run the labels stage first")
            self._index = index_from_json(read_json(path))
        return self._index

    def stage_labels(self) -> DatasetIndex:
        cfg = self.config
        labels_dir = self.out / "labels"
        if not Path(cfg.paths.annotations).is_dir():
            raise StageError("parse", "annotation directory not found", cfg.paths.annotations)
        try:
            index = load_annotation_dir(cfg.paths.annotations, cfg.network.n_au)
        except AnnotationFormatError as e:
            raise StageError("parse", str(e), f"{e.path}:{e.line}") from e
        self.report["videos"] = len(index.videos)
        self.report["raw_labels"] = index.counts.as_dict()

        if cfg.filter:
            index, filter_report, decisions = filter_index(index)
        else:
            filter_report, decisions = FilterReport(kept=len(index)), []
        write_json(labels_dir / "filter_report.json", filter_report.model_dump())
        write_json(labels_dir / "decisions.json", decisions)
        self.report["filter_report"] = filter_report.model_dump()

        try:
            hist = build_va_histograms(index, cfg.bins, cfg.jobs)
        except ValueError as e:
            raise StageError("histograms", str(e)) from e
        summary = histogram_summary(hist)
        write_json(labels_dir / "histograms.json", summary)
        atomic_write_text(labels_dir / "histograms.txt", histogram_text_grid(hist))
        self.report["histogram_totals"] = summary["totals"]

        rng = np.random.default_rng([cfg.seed, 1])
        index = apply_pseudo_policy(index, hist, cfg.pseudo, rng, on_empty="skip")
        write_json(labels_dir / "index.json", index_to_json(index))
        self.report["labels"] = index.label_summary()
        self._index = index
        self._progress("labels", 1, 1)
        return index

    def _audio_for(self, video_id: str) -> MelSpectrogram:
        cfg = self.config
        path = Path(cfg.paths.audio) / f"{video_id}.wav"
        try:
            wave = read_wav(path)
            if wave.sample_rate != cfg.mel.sample_rate:
                wave = resample(wave, cfg.mel.sample_rate)
            spec = mel_spectrogram(wave, cfg.mel)
        except (OSError, ValueError, AffectError) as e:
            raise StageError("audio", str(e), str(path)) from e
        atomic_write_bytes(self.out / "audio" / f"{video_id}.mels", encode_spectrogram(spec.columns))
        if cfg.spectrogram_csv:
            atomic_write_text(self.out / "audio" / f"{video_id}.csv", spectrogram_csv(spec.columns))
        return spec

    def stage_audio(self) -> Dict[str, MelSpectrogram]:
        video_ids = self.index.video_ids
        specs = self._map_videos(self._audio_for, video_ids)
        self._spectrograms = dict(zip(video_ids, specs))
        self.report["audio"] = {
            "spectrograms": len(specs),
            "columns": int(sum(s.columns.shape[0] for s in specs)),
        }
        self._progress("audio", len(specs), len(specs))
        return self._spectrograms

    def _spectrogram(self, video_id: str) -> MelSpectrogram:
        if video_id not in self._spectrograms:
            path = self.out / "audio" / f"{video_id}.mels"
            if not path.exists():
                raise AffectError(f"missing {path}; run the audio stage first")
            self._spectrograms[video_id] = MelSpectrogram(decode_spectrogram(path.read_bytes()), self.config.mel.stride)
        return self._spectrograms[video_id]

    def _align_video(self, video_id: str) -> List[float]:
        cfg = self.config
        frames_dir = Path(cfg.paths.frames) / video_id
        landmarks_dir = Path(cfg.paths.landmarks) / video_id
        out_dir = self.out / "aligned" / video_id
        size = (cfg.clip.height, cfg.clip.width)
        template = DEFAULT_TEMPLATE * (cfg.clip.width / ALIGNED_SIZE[1])
        mask_spec = MaskSpec(groups=FACE_CONTOURS, thickness=cfg.mask.thickness, antialias=cfg.mask.antialias)

        frame_files = sorted(frames_dir.glob("*.png"))
        if not frame_files:
            raise StageError("align", "no source frames", str(frames_dir))
        transforms, residuals = [], []
        for frame_file in frame_files:
            lm_file = landmarks_dir / f"{frame_file.stem}.csv"
            try:
                lm = read_landmarks(lm_file)
                transform = estimate_similarity(five_points_from_68(lm), template)
                image = read_rgb(frame_file)
            except (OSError, ValueError, AffectError) as e:
                raise StageError("align", str(e), str(lm_file)) from e
            write_png_rgb(out_dir / "faces" / f"{frame_file.stem}.png", align_face(image, transform, size))
            write_pgm(out_dir / "masks" / f"{frame_file.stem}.pgm", render_mask(lm, transform, mask_spec, size))
            transforms.append(
                {
                    "frame": frame_file.stem,
                    "scale": transform.scale,
                    "rotation": transform.rotation,
                    "tx": transform.tx,
                    "ty": transform.ty,
                    "residual": transform.residual,
                }
            )
            residuals.append(transform.residual)
        write_json(out_dir / "transforms.json", transforms)
        logger.debug(f"Aligned {len(frame_files)} frames of {video_id}")
        return residuals

    def stage_align(self) -> None:
        video_ids = self.index.video_ids
        residuals = [r for rs in self._map_videos(self._align_video, video_ids) for r in rs]
        self.report["align"] = {
            "frames": len(residuals),
            "mean_residual": float(np.mean(residuals)) if residuals else 0.0,
        }
        self._progress("align", len(video_ids), len(video_ids))

    def _store(self, video_id: str) -> FrameStore:
        if video_id not in self._stores:
            self._stores[video_id] = FrameStore.load(self.out / "aligned" / video_id, video_id)
        return self._stores[video_id]

    def anchors(self, video_id: str) -> List[int]:
        """Frames evaluated by the forward pass: every k-th frame that was not excluded"""
        k = self.config.forward_stride
        return [r.frame_index for r in self.index.video(video_id) if r.frame_index % k == 0 and not r.excluded]

    def _clips_for(self, video_id: str) -> List[Clip]:
        cfg = self.config
        store = self._store(video_id)
        rng = np.random.default_rng([cfg.seed, 2, self.index.video_ids.index(video_id)])
        clips = []
        for t in self.anchors(video_id):
            try:
                clip = sample_clip(store, t, cfg.clip)
            except (ValueError, AffectError) as e:
                raise StageError("clips", str(e), f"{video_id}:{t}") from e
            if cfg.augment:
                clip = augment_clip(clip, rng)
            clips.append(with_mask_mode(clip, cfg.mask.use_mask))
        return clips

    def stage_clips(self) -> None:
        cfg = self.config
        entries = []
        for video_id in self.index.video_ids:
            for clip in self._clips_for(video_id):
                entries.append({"video_id": video_id, "anchor": clip.anchor, "indices": list(clip.indices)})
                if cfg.write_clips:
                    write_clip(self.out / "clips" / video_id / f"{clip.anchor:05d}", clip, cfg.clip)
        write_json(self.out / "clips" / "index.json", {"clip": cfg.clip.model_dump(by_alias=True), "clips": entries})
        self.report["clips"] = {"count": len(entries)}
        self._progress("clips", len(entries), len(entries))

    def stage_forward(self) -> List[Dict[str, Any]]:
        cfg = self.config
        weights_stem = self.out / "forward" / "weights"
        weights = init_weights(cfg.network, cfg.seed)
        save_weights(weights_stem, weights)
        weights = load_weights(weights_stem, cfg.network)

        def run_video(video_id: str) -> List[Dict[str, Any]]:
            spec = self._spectrogram(video_id)
            rows = []
            for clip in self._clips_for(video_id):
                sub = extract_subspectrogram(spec, clip.anchor, cfg.clip.fps, cfg.subspec_seconds)
                try:
                    output = two_stream_forward(clip, sub, cfg.network, weights, cfg.stream_mode)
                except AffectError as e:
                    raise StageError("forward", str(e), f"{video_id}:{clip.anchor}") from e
                rows.append({"video_id": video_id, "frame_index": clip.anchor, "output": [float(x) for x in output]})
            return rows

        predictions = [row for rows in self._map_videos(run_video, self.index.video_ids) for row in rows]
        write_json(
            self.out / "forward" / "predictions.json",
            {"stream_mode": cfg.stream_mode, "head_width": cfg.network.head_width, "predictions": predictions},
        )
        self.report["forward"] = {"predictions": len(predictions), "parameters": weights.num_params}
        self._progress("forward", len(predictions), len(predictions))
        return predictions

    def stage_eval(self) -> Dict[str, Any]:
        cfg = self.config
        path = self.out / "forward" / "predictions.json"
        if not path.exists():
            raise AffectError(f"missing {path}; run the forward stage first")
        rows = read_json(path)["predictions"]
        records = {r.key: r for r in self.index.records()}
        try:
            chosen = [records[(row["video_id"], row["frame_index"])] for row in rows]
        except KeyError as e:
            raise StageError("eval", f"prediction for unknown frame {e}", str(path)) from e

        matrix = np.array([row["output"] for row in rows], dtype=np.float64).reshape(len(rows), cfg.network.head_width)
        pred = BatchPredictions.from_matrix(matrix, cfg.network.n_au)
        metrics = evaluation_report(pred, BatchTargets.from_records(chosen, cfg.network.n_au, use_pseudo=False))
        if rows:
            breakdown, _ = multitask_loss(pred, BatchTargets.from_records(chosen, cfg.network.n_au, use_pseudo=True))
            self.report["loss"] = breakdown.as_dict()
        write_json(self.out / "eval" / "metrics.json", metrics)
        self.report["metrics"] = metrics
        self._progress("eval", 1, 1)
        return metrics

    def run(self, stages: Sequence[str] = STAGES) -> Dict[str, Any]:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}")
        for stage in STAGES:
            if stage not in stages:
                continue
            logger.info(f"Running stage {stage}")
            try:
                getattr(self, f"stage_{stage}")()
            except StageError:
                raise
            except (AffectError, OSError, ValueError) as e:
                logger.error(f"Stage {stage} failed: {e}")
                raise StageError(stage, str(e)) from e
            self.report["stages"].append(stage)
        write_json(self.out / "report.json", self.report)
        return self.report


def run_pipeline(
    config: PipelineConfig,
    progress_callback: Optional[ProgressCallback] = None,
    stages: Sequence[str] = STAGES,
) -> Dict[str, Any]:
    """Execute the given stages in pipeline order and write ``report.json``"""
    Path(config.paths.output).mkdir(parents=True, exist_ok=True)
    return AffectPipeline(config, progress_callback).run(stages)


def report_digest(report: Dict[str, Any]) -> str:
    """SHA-256 of the canonical report text"""
    return hashlib.sha256(dump_json(report).encode("utf-8")).hexdigest()
