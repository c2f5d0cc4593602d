"""Dilated four-channel clip sampling and temporally coherent augmentation"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import cv2
import numpy as np

from ..config import ClipConfig
from ..utils.images import read_gray, read_rgb
from ..utils.storage import atomic_write_bytes, read_json, write_json
from .errors import AffectError, ClipIndexError

logger = logging.getLogger(__name__)

CLIP_MAGIC = b"CLP4"
MASK_CHANNEL = 3


@dataclass(frozen=True, eq=False)
class FrameStore:
    """Aligned faces (N x H x W x 3) and masks (N x H x W) of one video, uint8"""

    video_id: str
    faces: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        if self.faces.ndim != 4 or self.faces.shape[-1] != 3:
            raise ValueError(f"faces must be N x H x W x 3, got {self.faces.shape}")
        if self.masks.shape != self.faces.shape[:3]:
            raise ValueError(f"masks shape {self.masks.shape} does not match faces {self.faces.shape}")

    def __len__(self) -> int:
        return self.faces.shape[0]

    @classmethod
    def load(cls, video_dir: Union[str, Path], video_id: str = "") -> "FrameStore":
        """Read ``faces/NNNNN.png`` and ``masks/NNNNN.pgm`` in frame order"""
        root = Path(video_dir)
        face_files = sorted((root / "faces").glob("*.png"))
        mask_files = sorted((root / "masks").glob("*.pgm"))
        if len(face_files) != len(mask_files):
            raise AffectError(f"{root}: {len(face_files)} faces but {len(mask_files)} masks")
        if not face_files:
            raise AffectError(f"{root}: no aligned frames")
        faces = np.stack([read_rgb(p) for p in face_files])
        masks = np.stack([read_gray(p) for p in mask_files])
        return cls(video_id=video_id or root.name, faces=faces, masks=masks)


@dataclass(frozen=True, eq=False)
class Clip:
    """l x H x W x 4 tensor in [0, 1]; channels 0-2 face RGB, channel 3 mask"""

    tensor: np.ndarray
    anchor: int
    indices: Tuple[int, ...] = ()
    video_id: str = ""

    @property
    def length(self) -> int:
        return self.tensor.shape[0]


def clip_indices(t: int, cfg: ClipConfig) -> List[int]:
    """{t - d*k : k = 0..l-1} in chronological order, negative indices clamped to 0"""
    return [max(t - cfg.dilation * k, 0) for k in reversed(range(cfg.length))]


def sample_clip(store: FrameStore, t: int, cfg: ClipConfig) -> Clip:
    if not 0 <= t < len(store):
        raise ClipIndexError(f"frame {t} outside video {store.video_id!r} of {len(store)} frames")
    if store.faces.shape[1:3] != (cfg.height, cfg.width):
        raise ValueError(f"store frames are {store.faces.shape[1:3]}, config expects {(cfg.height, cfg.width)}")

    indices = clip_indices(t, cfg)
    tensor = np.empty((cfg.length, cfg.height, cfg.width, 4), dtype=np.float32)
    tensor[..., :3] = store.faces[indices] / np.float32(255.0)
    tensor[..., MASK_CHANNEL] = store.masks[indices] / np.float32(255.0)
    return Clip(tensor=tensor, anchor=t, indices=tuple(indices), video_id=store.video_id)


def clip_span_seconds(cfg: ClipConfig) -> float:
    """Time span l * d / fps as stated for the clip layout"""
    return cfg.length * cfg.dilation / cfg.fps


@dataclass(frozen=True)
class AugmentParams:
    """One draw of augmentation parameters, shared by all frames of a clip"""

    flip: bool = False
    hue_shift: float = 0.0
    saturation_scale: float = 1.0
    lightness_scale: float = 1.0

    @property
    def is_color_identity(self) -> bool:
        return self.hue_shift == 0.0 and self.saturation_scale == 1.0 and self.lightness_scale == 1.0


HUE_RANGE = 18.0
SCALE_RANGE = (0.9, 1.1)


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    hue = float(rng.uniform(-HUE_RANGE, HUE_RANGE))
    sat, light = (float(x) for x in rng.uniform(*SCALE_RANGE, size=2))
    return AugmentParams(flip=flip, hue_shift=hue, saturation_scale=sat, lightness_scale=light)


def rgb_to_hsl(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0,1] -> HSL with hue in degrees, any leading shape"""
    rgb = np.ascontiguousarray(rgb, dtype=np.float32)
    hls = cv2.cvtColor(rgb.reshape(-1, 1, 3), cv2.COLOR_RGB2HLS).reshape(rgb.shape)
    return hls[..., [0, 2, 1]]


def hsl_to_rgb(hsl: np.ndarray) -> np.ndarray:
    hls = np.ascontiguousarray(np.asarray(hsl, dtype=np.float32)[..., [0, 2, 1]])
    hls[..., 0] = np.mod(hls[..., 0], 360.0)
    rgb = cv2.cvtColor(hls.reshape(-1, 1, 3), cv2.COLOR_HLS2RGB).reshape(hls.shape)
    return np.clip(rgb, 0.0, 1.0)


def apply_augmentation(clip: Clip, params: AugmentParams) -> Clip:
    """Same flip and color jitter for every frame; color never touches the mask"""
    tensor = clip.tensor
    if params.flip:
        tensor = tensor[:, :, ::-1, :]
    tensor = np.array(tensor, dtype=np.float32, copy=True)

    if not params.is_color_identity:
        hsl = rgb_to_hsl(tensor[..., :3])
        hsl[..., 0] = np.mod(hsl[..., 0] + params.hue_shift, 360.0)
        hsl[..., 1] = np.clip(hsl[..., 1] * params.saturation_scale, 0.0, 1.0)
        hsl[..., 2] = np.clip(hsl[..., 2] * params.lightness_scale, 0.0, 1.0)
        tensor[..., :3] = hsl_to_rgb(hsl).astype(np.float32)
    return replace(clip, tensor=tensor)


def augment_clip(clip: Clip, rng: np.random.Generator) -> Clip:
    return apply_augmentation(clip, draw_augment_params(rng))


def with_mask_mode(clip: Clip, use_mask: bool) -> Clip:
    """Zero the mask channel for the no-mask variant"""
    if use_mask:
        return clip
    tensor = clip.tensor.copy()
    tensor[..., MASK_CHANNEL] = 0.0
    return replace(clip, tensor=tensor)


def encode_clip(clip: Clip) -> bytes:
    """``CLP4`` + u32 l, H, W + little-endian f32 payload (l x H x W x 4)"""
    length, height, width, _ = clip.tensor.shape
    header = CLIP_MAGIC + struct.pack("<III", length, height, width)
    return header + np.ascontiguousarray(clip.tensor, dtype="<f4").tobytes()


def decode_clip(payload: bytes) -> np.ndarray:
    if payload[:4] != CLIP_MAGIC or len(payload) < 16:
        raise AffectError("not a CLP4 clip")
    length, height, width = struct.unpack("<III", payload[4:16])
    body = payload[16:]
    expected = length * height * width * 4 * 4
    if len(body) != expected:
        raise AffectError(f"CLP4 payload has {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype="<f4").reshape(length, height, width, 4).copy()


def clip_sidecar(clip: Clip, cfg: ClipConfig) -> Dict[str, Any]:
    return {
        "video_id": clip.video_id,
        "anchor": clip.anchor,
        "indices": list(clip.indices),
        "config": cfg.model_dump(by_alias=True),
    }


def write_clip(stem: Union[str, Path], clip: Clip, cfg: ClipConfig) -> Path:
    """Write ``<stem>.clp`` and its ``<stem>.json`` sidecar"""
    stem = Path(stem)
    path = atomic_write_bytes(stem.with_suffix(".clp"), encode_clip(clip))
    write_json(stem.with_suffix(".json"), clip_sidecar(clip, cfg))
    return path


def read_clip(stem: Union[str, Path]) -> Clip:
    stem = Path(stem)
    tensor = decode_clip(stem.with_suffix(".clp").read_bytes())
    sidecar = read_json(stem.with_suffix(".json"))
    return Clip(
        tensor=tensor,
        anchor=int(sidecar["anchor"]),
        indices=tuple(sidecar.get("indices", ())),
        video_id=sidecar.get("video_id", ""),
    )
