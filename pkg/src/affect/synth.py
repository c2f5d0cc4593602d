"""Synthetic corpus generator for desk-scale end-to-end runs

Writes the on-disk layout read by the pipeline:

    annotations/{VA,EX,AU}/<video>.txt
    landmarks/<video>/<frame>.csv
    frames/<video>/<frame>.png
    audio/<video>.wav
    manifest.json
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from ..utils.images import write_png_rgb
from ..utils.storage import atomic_write_text, write_json
from .annotations import (
    AU_ABSENT,
    EX_ABSENT,
    EXPRESSION_NAMES,
    NUM_EXPRESSIONS,
    VA_ABSENT,
    Expression,
    serialize_annotations,
)
from .audiodsp import Waveform, write_wav
from .errors import AffectError, OutputCollisionError
from .geometry import SimilarityTransform, write_landmarks
from .labelfusion import (
    NEUTRAL_NORM_LIMIT,
    REASON_HAPPY_NEGATIVE,
    REASON_INVALID,
    REASON_NEUTRAL_HIGH_NORM,
    REASON_SAD_POSITIVE,
)

logger = logging.getLogger(__name__)

CONTRADICTION_RULES = (REASON_HAPPY_NEGATIVE, REASON_SAD_POSITIVE, REASON_NEUTRAL_HIGH_NORM, REASON_INVALID)

# (valence mean, arousal mean, std) per expression
DEFAULT_VA_GAUSSIANS: Dict[str, Tuple[float, float, float]] = {
    "neutral": (0.0, 0.0, 0.15),
    "anger": (-0.5, 0.6, 0.15),
    "disgust": (-0.55, 0.3, 0.15),
    "fear": (-0.45, 0.65, 0.15),
    "happiness": (0.6, 0.4, 0.2),
    "sadness": (-0.6, -0.3, 0.2),
    "surprise": (0.2, 0.7, 0.15),
}

# (mouth opening, mouth corner lift, brow raise) in template pixels
EXPRESSION_SHAPES: Dict[int, Tuple[float, float, float]] = {
    Expression.NEUTRAL: (0.0, 0.0, 0.0),
    Expression.ANGER: (0.5, -1.0, -3.0),
    Expression.DISGUST: (0.5, -2.0, -1.5),
    Expression.FEAR: (3.0, -1.0, 3.0),
    Expression.HAPPINESS: (1.5, 3.0, 0.5),
    Expression.SADNESS: (0.0, -3.0, 1.0),
    Expression.SURPRISE: (6.0, 0.0, 4.0),
}

# base tone per expression in Hz
EXPRESSION_TONES = (220.0, 330.0, 277.0, 415.0, 523.0, 196.0, 659.0)


class SyntheticSpec(BaseModel):
    """Shape of a generated corpus"""

    n_videos: int = Field(default=10, ge=0)
    frames_per_video: int = Field(default=100, ge=1)
    coverage: Dict[str, float] = Field(
        default_factory=lambda: {"VA": 0.75, "EX": 0.59, "AU": 0.5},
        description="Fraction of all frames labeled per task",
    )
    va_gaussians: Dict[str, Tuple[float, float, float]] = Field(default_factory=lambda: dict(DEFAULT_VA_GAUSSIANS))
    contradictions: Dict[str, int] = Field(
        default_factory=lambda: {rule: 0 for rule in CONTRADICTION_RULES},
        description="Frames per filtering rule made contradictory on purpose",
    )
    n_au: int = Field(default=8, ge=1)
    au_rate: float = Field(default=0.3, ge=0.0, le=1.0)
    frame_size: int = Field(default=160, ge=112)
    fps: int = Field(default=30, ge=1)
    sample_rate: int = Field(default=48000, gt=0)

    @field_validator("coverage")
    @classmethod
    def check_coverage(cls, v: Dict[str, float]) -> Dict[str, float]:
        for task in ("VA", "EX", "AU"):
            frac = v.setdefault(task, 0.0)
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"coverage of {task} must lie in [0, 1], got {frac}")
        unknown = set(v) - {"VA", "EX", "AU"}
        if unknown:
            raise ValueError(f"unknown coverage tasks {sorted(unknown)}")
        return v

    @field_validator("contradictions")
    @classmethod
    def check_contradictions(cls, v: Dict[str, int]) -> Dict[str, int]:
        unknown = set(v) - set(CONTRADICTION_RULES)
        if unknown:
            raise ValueError(f"unknown contradiction rules {sorted(unknown)}")
        if any(n < 0 for n in v.values()):
            raise ValueError("contradiction counts must be nonnegative")
        return {rule: int(v.get(rule, 0)) for rule in CONTRADICTION_RULES}

    @field_validator("va_gaussians")
    @classmethod
    def check_gaussians(cls, v: Dict[str, Tuple[float, float, float]]) -> Dict[str, Tuple[float, float, float]]:
        merged = dict(DEFAULT_VA_GAUSSIANS)
        merged.update(v)
        unknown = set(merged) - set(EXPRESSION_NAMES)
        if unknown:
            raise ValueError(f"unknown expressions {sorted(unknown)}")
        if any(std <= 0 for _, _, std in merged.values()):
            raise ValueError("VA standard deviations must be positive")
        return merged

    @model_validator(mode="after")
    def check_budget(self) -> "SyntheticSpec":
        if sum(self.contradictions.values()) > self.total_frames:
            raise ValueError("more contradictions requested than frames")
        return self

    @property
    def total_frames(self) -> int:
        return self.n_videos * self.frames_per_video

    def labeled_count(self, task: str) -> int:
        return int(math.floor(self.coverage[task] * self.total_frames + 0.5))


def video_id_for(i: int) -> str:
    return f"video{i:03d}"


def frame_name(frame_index: int) -> str:
    return f"{frame_index:05d}"


def _arc(cx: float, cy: float, rx: float, ry: float, angles: np.ndarray) -> np.ndarray:
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


def canonical_landmarks(shape: Tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """68-point face in the 112 x 112 aligned frame, deformed by (opening, corner lift, brow raise)"""
    opening, lift, brow = shape
    jaw = _arc(56.0, 62.0, 40.0, 48.0, np.pi * (1.0 - np.arange(17) / 16.0))
    brow_t = np.linspace(0.0, 1.0, 5)
    left_brow = np.stack([26.0 + 24.0 * brow_t, 40.0 - brow - 4.0 * np.sin(np.pi * brow_t)], axis=1)
    right_brow = np.stack([62.0 + 24.0 * brow_t, 40.0 - brow - 4.0 * np.sin(np.pi * brow_t)], axis=1)
    bridge = np.array([[56.0, 52.0], [56.0, 58.0], [56.0, 64.0], [56.0252, 71.7366]])
    base = np.array([[48.0, 76.0], [52.0, 77.0], [56.0, 78.0], [60.0, 77.0], [64.0, 76.0]])
    eye_angles = np.pi + np.arange(6) * np.pi / 3.0
    left_eye = _arc(38.2946, 51.6963, 7.0, 3.0, eye_angles)
    right_eye = _arc(73.5318, 51.5014, 7.0, 3.0, eye_angles)
    outer = _arc(56.1396, 92.2848, 14.5903, 6.0 + opening / 2.0, np.pi + np.arange(12) * np.pi / 6.0)
    # corners move up for positive lift
    outer[[0, 6], 1] -= lift
    inner = _arc(56.1396, 92.2848 - lift / 2.0, 9.0, 1.0 + opening, np.pi + np.arange(8) * np.pi / 4.0)
    return np.concatenate([jaw, left_brow, right_brow, bridge, base, left_eye, right_eye, outer, inner])


def _draw_face(size: int, lm: np.ndarray, background: Tuple[int, int, int], skin: Tuple[int, int, int]) -> np.ndarray:
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = background
    scale = 16.0

    def pts(idx) -> np.ndarray:
        return np.round(lm[idx] * scale).astype(np.int32).reshape(-1, 1, 2)

    hull = cv2.convexHull(np.round(np.concatenate([lm[0:17], lm[17:27] - [0, 12]]) * scale).astype(np.int32))
    cv2.fillPoly(image, [hull], skin, lineType=cv2.LINE_AA, shift=4)
    dark = (40, 30, 30)
    cv2.polylines(image, [pts(range(17, 22)), pts(range(22, 27))], False, dark, 2, cv2.LINE_AA, 4)
    cv2.fillPoly(image, [pts(range(36, 42)), pts(range(42, 48))], dark, cv2.LINE_AA, 4)
    cv2.polylines(image, [pts(range(27, 31)), pts(range(31, 36))], False, (120, 80, 70), 1, cv2.LINE_AA, 4)
    cv2.fillPoly(image, [pts(range(48, 60))], (170, 60, 70), cv2.LINE_AA, 4)
    cv2.fillPoly(image, [pts(range(60, 68))], (60, 20, 25), cv2.LINE_AA, 4)
    return image


def _expression_track(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant latent expression per frame"""
    track = np.empty(n_frames, dtype=np.int64)
    pos = 0
    while pos < n_frames:
        length = int(rng.integers(15, 45))
        track[pos : pos + length] = rng.integers(NUM_EXPRESSIONS)
        pos += length
    return track


def _consistent_va(ex: int, spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[float, float]:
    """Draw VA from the class Gaussian, folded so it satisfies every filtering rule"""
    mv, ma, std = spec.va_gaussians[EXPRESSION_NAMES[ex]]
    v, a = np.clip(rng.normal([mv, ma], std), -1.0, 1.0)
    if ex == Expression.HAPPINESS:
        v = abs(v)
    elif ex == Expression.SADNESS:
        v = -abs(v)
    elif ex == Expression.NEUTRAL:
        norm = math.hypot(v, a)
        if norm > 0.9 * NEUTRAL_NORM_LIMIT:
            v, a = v * 0.9 * NEUTRAL_NORM_LIMIT / norm, a * 0.9 * NEUTRAL_NORM_LIMIT / norm
    return round(float(v), 4) + 0.0, round(float(a), 4) + 0.0


def _contradiction(rule: str, rng: np.random.Generator) -> Tuple[Tuple[float, float], int]:
    """Raw (VA, EX) violating exactly one filtering rule"""
    arousal = round(float(rng.uniform(-0.5, 0.5)), 4)
    if rule == REASON_HAPPY_NEGATIVE:
        return (round(-float(rng.uniform(0.1, 0.9)), 4), arousal), int(Expression.HAPPINESS)
    if rule == REASON_SAD_POSITIVE:
        return (round(float(rng.uniform(0.1, 0.9)), 4), arousal), int(Expression.SADNESS)
    if rule == REASON_NEUTRAL_HIGH_NORM:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(0.6, 0.95)
        return (round(radius * math.cos(angle), 4), round(radius * math.sin(angle), 4)), int(Expression.NEUTRAL)
    # out-of-range valence
    ex = int(rng.integers(NUM_EXPRESSIONS))
    return (round(float(rng.uniform(1.1, 2.0)), 4), arousal), ex


def _tone(track: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-expression tone mixture following the latent track"""
    samples_per_frame = spec.sample_rate / spec.fps
    n = int(round(len(track) * samples_per_frame))
    t = np.arange(n) / spec.sample_rate
    frame_of = np.minimum((np.arange(n) / samples_per_frame).astype(np.int64), len(track) - 1)
    base = np.asarray(EXPRESSION_TONES)[track[frame_of]]
    signal = 0.25 * np.sin(2 * np.pi * base * t) + 0.1 * np.sin(2 * np.pi * 2.5 * base * t)
    return signal + 0.01 * rng.standard_normal(n)


def _assign(total: int, count: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(total, dtype=bool)
    mask[rng.permutation(total)[:count]] = True
    return mask


def synth_dataset(spec: SyntheticSpec, out_dir: Union[str, Path], rng: np.random.Generator) -> Dict[str, Any]:
    """Write a synthetic corpus and return its ground-truth manifest"""
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        raise OutputCollisionError(f"output directory {root} exists and is not empty")
    for sub in ("annotations/VA", "annotations/EX", "annotations/AU", "landmarks", "frames", "audio"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    total = spec.total_frames
    fpv = spec.frames_per_video
    has_va = _assign(total, spec.labeled_count("VA"), rng)
    has_ex = _assign(total, spec.labeled_count("EX"), rng)
    has_au = _assign(total, spec.labeled_count("AU"), rng)

    co_labeled = np.flatnonzero(has_va & has_ex)
    n_contra = sum(spec.contradictions.values())
    if n_contra > len(co_labeled):
        raise AffectError(f"{n_contra} contradictions requested but only {len(co_labeled)} co-labeled frames")
    chosen = rng.permutation(co_labeled)[:n_contra]
    rule_of: Dict[int, str] = {}
    pos = 0
    for rule in CONTRADICTION_RULES:
        for flat in chosen[pos : pos + spec.contradictions[rule]]:
            rule_of[int(flat)] = rule
        pos += spec.contradictions[rule]

    contradictions: List[Dict[str, Any]] = []
    videos: List[str] = []
    for vi in range(spec.n_videos):
        video_id = video_id_for(vi)
        videos.append(video_id)
        track = _expression_track(fpv, rng)
        background = tuple(int(c) for c in rng.integers(20, 90, size=3))
        skin = tuple(int(c) for c in rng.integers(150, 230, size=3))
        scale = float(rng.uniform(1.05, 1.25))
        rotation = math.radians(float(rng.uniform(-8.0, 8.0)))
        offset = rng.uniform(-4.0, 4.0, size=2)

        va_lines, ex_lines, au_lines = [], [], []
        for f in range(fpv):
            flat = vi * fpv + f
            latent = int(track[f])

            if flat in rule_of:
                va, ex = _contradiction(rule_of[flat], rng)
                contradictions.append({"video_id": video_id, "frame_index": f, "rule": rule_of[flat]})
            else:
                va, ex = _consistent_va(latent, spec, rng), latent
            va_lines.append(va if has_va[flat] else (VA_ABSENT, VA_ABSENT))
            ex_lines.append(ex if has_ex[flat] else EX_ABSENT)
            if has_au[flat]:
                au_lines.append(tuple(int(b) for b in rng.random(spec.n_au) < spec.au_rate))
            else:
                au_lines.append(tuple([AU_ABSENT] * spec.n_au))

            jitter = rng.normal(0.0, 0.6, size=2)
            placement = SimilarityTransform(
                scale=scale,
                rotation=rotation + math.radians(float(rng.normal(0.0, 1.0))),
                tx=0.0,
                ty=0.0,
            )
            face = placement.apply(canonical_landmarks(EXPRESSION_SHAPES[latent]) - [56.0, 62.0])
            face += spec.frame_size / 2.0 + offset + jitter
            lm = face + rng.normal(0.0, 0.3, size=face.shape)
            write_landmarks(root / "landmarks" / video_id / f"{frame_name(f)}.csv", lm)
            write_png_rgb(root / "frames" / video_id / f"{frame_name(f)}.png", _draw_face(spec.frame_size, face, background, skin))

        atomic_write_text(root / "annotations" / "VA" / f"{video_id}.txt", serialize_annotations(va_lines, "VA"))
        atomic_write_text(root / "annotations" / "EX" / f"{video_id}.txt", serialize_annotations(ex_lines, "EX"))
        atomic_write_text(root / "annotations" / "AU" / f"{video_id}.txt", serialize_annotations(au_lines, "AU", spec.n_au))
        write_wav(root / "audio" / f"{video_id}.wav", Waveform(_tone(track, spec, rng), spec.sample_rate))
        logger.debug(f"Generated {video_id} with {fpv} frames")

    contradictions.sort(key=lambda c: (c["video_id"], c["frame_index"]))
    manifest = {
        "spec": spec.model_dump(mode="json"),
        "videos": videos,
        "total_frames": total,
        "labeled": {"VA": int(has_va.sum()), "EX": int(has_ex.sum()), "AU": int(has_au.sum())},
        "contradictions": contradictions,
        "contradiction_counts": {rule: spec.contradictions[rule] for rule in CONTRADICTION_RULES},
    }
    write_json(root / "manifest.json", manifest)
    logger.info(f"Synthesized {len(videos)} videos, {total} frames, {len(contradictions)} contradictions into {root}")
    return manifest
