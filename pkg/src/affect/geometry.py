"""Five-point similarity alignment and landmark mask rendering"""

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import cv2
import numpy as np

from ..utils.storage import atomic_write_text
from .errors import AffectError, DegenerateConfigurationError

logger = logging.getLogger(__name__)

ALIGNED_SIZE = (112, 112)

# left eye, right eye, nose tip, left mouth corner, right mouth corner
DEFAULT_TEMPLATE = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ],
    dtype=np.float64,
)


def check_landmarks(lm: np.ndarray) -> np.ndarray:
    lm = np.asarray(lm, dtype=np.float64)
    if lm.shape != (68, 2):
        raise AffectError(f"expected 68 x 2 landmarks, got {lm.shape}")
    if not np.isfinite(lm).all():
        raise AffectError("landmarks contain non-finite coordinates")
    return lm


def five_points_from_68(lm: np.ndarray) -> np.ndarray:
    """Eye centers (means of 36-41 and 42-47), nose tip 30, mouth corners 48 and 54"""
    lm = check_landmarks(lm)
    return np.stack(
        [
            lm[36:42].mean(axis=0),
            lm[42:48].mean(axis=0),
            lm[30],
            lm[48],
            lm[54],
        ]
    )


@dataclass(frozen=True)
class SimilarityTransform:
    """x' = scale * R(rotation) x + (tx, ty), image coordinates"""

    scale: float
    rotation: float
    tx: float
    ty: float
    residual: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(scale=1.0, rotation=0.0, tx=0.0, ty=0.0)

    @property
    def matrix(self) -> np.ndarray:
        """2 x 3 affine matrix s*R | t"""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array(
            [
                [self.scale * c, -self.scale * s, self.tx],
                [self.scale * s, self.scale * c, self.ty],
            ]
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        m = self.matrix
        return np.asarray(points, dtype=np.float64) @ m[:, :2].T + m[:, 2]


def transform_matrix(transform: SimilarityTransform) -> np.ndarray:
    return transform.matrix


def apply_transform(transform: SimilarityTransform, points: np.ndarray) -> np.ndarray:
    """Map N x 2 points through the transform"""
    return transform.apply(points)


def estimate_similarity(src: np.ndarray, dst: np.ndarray = DEFAULT_TEMPLATE) -> SimilarityTransform:
    """Least-squares similarity mapping src onto dst (Umeyama closed form)"""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must be matching N x 2 arrays, got {src.shape} and {dst.shape}")

    n = src.shape[0]
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_demean = src - src_mean
    dst_demean = dst - dst_mean

    src_var = (src_demean**2).sum() / n
    if src_var < 1e-18:
        raise DegenerateConfigurationError("source points are coincident")

    cov = dst_demean.T @ src_demean / n
    u, sigma, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float(sigma @ d / src_var)
    if scale <= 0:
        raise DegenerateConfigurationError("destination points are coincident")
    translation = dst_mean - scale * rot @ src_mean

    fitted = src @ (scale * rot).T + translation
    residual = float(np.sqrt(((fitted - dst) ** 2).sum(axis=1).mean()))
    return SimilarityTransform(
        scale=scale,
        rotation=math.atan2(rot[1, 0], rot[0, 0]),
        tx=float(translation[0]),
        ty=float(translation[1]),
        residual=residual,
    )


def alignment_residual(src: np.ndarray, dst: np.ndarray, transform: SimilarityTransform) -> float:
    """Sum of squared distances between transformed src and dst"""
    return float(((transform.apply(src) - np.asarray(dst, dtype=np.float64)) ** 2).sum())


def align_face(image: np.ndarray, transform: SimilarityTransform, out: Tuple[int, int] = ALIGNED_SIZE) -> np.ndarray:
    """Warp the image into the aligned frame with bilinear sampling; samples outside the source are black

    The transform maps source image coordinates to output coordinates (landmarks onto the
    template), so a translation of (1, 0) moves the content one column right.
    """
    height, width = out
    return cv2.warpAffine(
        image,
        transform.matrix,
        (width, height),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )


@dataclass(frozen=True)
class ContourGroup:
    name: str
    indices: Tuple[int, ...]
    closed: bool = False


@dataclass(frozen=True)
class MaskSpec:
    """Contour groups over landmark indices and stroke geometry"""

    groups: Tuple[ContourGroup, ...]
    thickness: float = 2.0
    antialias: float = 1.0

    def __post_init__(self):
        for group in self.groups:
            if any(not 0 <= i < 68 for i in group.indices):
                raise ValueError(f"contour {group.name} indexes outside 0..67")

    def segments(self) -> list:
        pairs = []
        for group in self.groups:
            idx = list(group.indices)
            pairs.extend(zip(idx[:-1], idx[1:]))
            if group.closed and len(idx) > 2:
                pairs.append((idx[-1], idx[0]))
        return pairs


FACE_CONTOURS = (
    ContourGroup("left_brow", tuple(range(17, 22))),
    ContourGroup("right_brow", tuple(range(22, 27))),
    ContourGroup("left_eye", tuple(range(36, 42)), closed=True),
    ContourGroup("right_eye", tuple(range(42, 48)), closed=True),
    ContourGroup("nose_bridge", tuple(range(27, 31))),
    ContourGroup("nose_base", tuple(range(31, 36))),
    ContourGroup("outer_lip", tuple(range(48, 60)), closed=True),
    ContourGroup("jaw", tuple(range(0, 17))),
)

DEFAULT_MASK_SPEC = MaskSpec(groups=FACE_CONTOURS)


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each pixel center to segment ab"""
    ab = b - a
    length_sq = float(ab @ ab)
    ap = px - a
    if length_sq == 0.0:
        return np.sqrt((ap**2).sum(axis=-1))
    t = np.clip((ap @ ab) / length_sq, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(((px - closest) ** 2).sum(axis=-1))


def render_polylines(
    segments: Sequence[Tuple[np.ndarray, np.ndarray]],
    out: Tuple[int, int],
    thickness: float,
    antialias: float = 1.0,
) -> np.ndarray:
    """Distance-field strokes: full intensity within thickness/2, smoothstep fringe of width antialias"""
    height, width = out
    mask = np.zeros((height, width), dtype=np.float64)
    half = thickness / 2.0
    reach = half + antialias
    ys, xs = np.mgrid[0:height, 0:width]
    pixels = np.stack([xs, ys], axis=-1).astype(np.float64)

    for a, b in segments:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        x0, x1 = sorted((a[0], b[0]))
        y0, y1 = sorted((a[1], b[1]))
        if x1 < -reach or y1 < -reach or x0 > width - 1 + reach or y0 > height - 1 + reach:
            continue
        # only the bounding box of the stroke can be touched
        c0 = max(int(math.floor(x0 - reach)), 0)
        c1 = min(int(math.ceil(x1 + reach)) + 1, width)
        r0 = max(int(math.floor(y0 - reach)), 0)
        r1 = min(int(math.ceil(y1 + reach)) + 1, height)
        dist = _segment_distance(pixels[r0:r1, c0:c1], a, b)
        t = np.clip((reach - dist) / antialias, 0.0, 1.0)
        coverage = t * t * (3.0 - 2.0 * t)
        np.maximum(mask[r0:r1, c0:c1], coverage, out=mask[r0:r1, c0:c1])

    return np.round(mask * 255.0).astype(np.uint8)


def render_mask(
    lm: np.ndarray,
    transform: SimilarityTransform,
    spec: MaskSpec = DEFAULT_MASK_SPEC,
    out: Tuple[int, int] = ALIGNED_SIZE,
) -> np.ndarray:
    """Map landmarks through the transform and draw every contour group; background 0, stroke 255"""
    points = transform.apply(check_landmarks(lm))
    segments = [(points[i], points[j]) for i, j in spec.segments()]
    return render_polylines(segments, out, spec.thickness, spec.antialias)


def read_landmarks(path: Union[str, Path]) -> np.ndarray:
    """68 lines of ``x,y`` pixel coordinates"""
    try:
        lm = np.loadtxt(str(path), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise AffectError(f"malformed landmark file {path}: {e}") from e
    return check_landmarks(lm)


def write_landmarks(path: Union[str, Path], lm: np.ndarray) -> Path:
    buffer = io.StringIO()
    np.savetxt(buffer, check_landmarks(lm), fmt="%.4f", delimiter=",")
    return atomic_write_text(path, buffer.getvalue())
