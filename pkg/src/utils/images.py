"""Image file IO through OpenCV (RGB order in memory)"""

from pathlib import Path
from typing import Union

import cv2
import numpy as np

from ..affect.errors import AffectError
from .storage import atomic_write_bytes


def read_rgb(path: Union[str, Path]) -> np.ndarray:
    """H x W x 3 uint8 RGB; grayscale files are expanded to three channels"""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise AffectError(f"cannot read image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_gray(path: Union[str, Path]) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise AffectError(f"cannot read image {path}")
    return image


def _encode(ext: str, image: np.ndarray) -> bytes:
    ok, buffer = cv2.imencode(ext, image)
    if not ok:
        raise AffectError(f"cannot encode {ext} image of shape {image.shape}")
    return buffer.tobytes()


def write_png_rgb(path: Union[str, Path], image: np.ndarray) -> Path:
    bgr = cv2.cvtColor(np.ascontiguousarray(image, dtype=np.uint8), cv2.COLOR_RGB2BGR)
    return atomic_write_bytes(path, _encode(".png", bgr))


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Binary (P5) 8-bit PGM"""
    return atomic_write_bytes(path, _encode(".pgm", np.ascontiguousarray(image, dtype=np.uint8)))
