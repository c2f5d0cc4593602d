"""Waveform resampling, mel spectrograms and frame-aligned sub-spectrograms"""

import io
import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Union

import librosa
import numpy as np
from scipy import signal
from scipy.io import wavfile

from ..config import MelConfig
from ..utils.storage import atomic_write_bytes
from .errors import AffectError

logger = logging.getLogger(__name__)

SPECTROGRAM_MAGIC = b"MELS"
TAPS_PER_PHASE = 64
KAISER_BETA = 5.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal and its sample rate in Hz"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """T x n_mels mel power grid; column t is centered at t * stride seconds"""

    columns: np.ndarray
    stride: float

    @property
    def column_rate(self) -> float:
        return 1.0 / self.stride

    @property
    def shape(self):
        return self.columns.shape


@dataclass(frozen=True, eq=False)
class SubSpectrogram:
    """Window of a spectrogram centered on one video frame"""

    grid: np.ndarray
    window_length: float
    center_column: int


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling, output length round(n * target / source)"""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    n = len(wave.samples)
    if target_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), target_rate)
    if n == 0:
        return Waveform(np.zeros(0, dtype=np.float64), target_rate)

    g = math.gcd(int(wave.sample_rate), int(target_rate))
    up, down = int(target_rate) // g, int(wave.sample_rate) // g
    half_len = TAPS_PER_PHASE * up // 2
    taps = signal.firwin(2 * half_len + 1, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    out = signal.resample_poly(wave.samples.astype(np.float64), up, down, window=taps)

    target_len = int(math.floor(n * up / down + 0.5))
    if len(out) >= target_len:
        out = out[:target_len]
    else:
        out = np.pad(out, (0, target_len - len(out)))
    logger.debug(f"Resampled {n} samples {wave.sample_rate} Hz -> {target_len} samples {target_rate} Hz")
    return Waveform(out, int(target_rate))


@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    basis = librosa.filters.mel(
        sr=sample_rate,
        n_fft=n_fft,
        n_mels=n_mels,
        fmin=0.0,
        fmax=sample_rate / 2.0,
        htk=True,
        norm=None,
        dtype=np.float64,
    )
    basis.setflags(write=False)
    return basis


@lru_cache(maxsize=8)
def _analysis_window(win_samples: int, n_fft: int) -> np.ndarray:
    """Periodic Hann window zero-padded to n_fft, centered"""
    window = signal.get_window("hann", win_samples, fftbins=True)
    left = (n_fft - win_samples) // 2
    padded = np.zeros(n_fft, dtype=np.float64)
    padded[left : left + win_samples] = window
    padded.setflags(write=False)
    return padded


def hz_to_mel(freq):
    """HTK mel scale"""
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular filter"""
    edges = librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=0.0, fmax=cfg.sample_rate / 2.0, htk=True)
    return edges[1:-1]


def mel_spectrogram(wave: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Centered, reflect-padded STFT power projected on HTK mel filters (no log compression)"""
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {wave.sample_rate} Hz differs from configured {cfg.sample_rate} Hz")

    hop, n_fft = cfg.hop_samples, cfg.n_fft
    samples = wave.samples.astype(np.float64)
    n_columns = 1 + len(samples) // hop
    if len(samples) == 0:
        return MelSpectrogram(np.zeros((1, cfg.n_mels)), cfg.stride)

    pad = n_fft // 2
    padded = np.pad(samples, pad, mode="reflect" if len(samples) > 1 else "constant")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_columns]
    power = np.abs(np.fft.rfft(frames * _analysis_window(cfg.win_samples, n_fft), axis=1)) ** 2
    columns = power @ _mel_basis(cfg.sample_rate, n_fft, cfg.n_mels).T
    logger.debug(f"Computed mel spectrogram {columns.shape} from {len(samples)} samples")
    return MelSpectrogram(columns, cfg.stride)


def subspectrogram_rows(w: float, stride: float) -> int:
    return int(round(w / stride)) + 1


def extract_subspectrogram(spec: MelSpectrogram, frame_index: int, fps: int = 30, w: float = 10.0) -> SubSpectrogram:
    """Window of w seconds centered on the frame's time; zero rows outside the spectrogram"""
    if w <= 0:
        raise ValueError(f"window length must be positive, got {w}")
    rows = subspectrogram_rows(w, spec.stride)
    center = int(math.floor(frame_index / fps / spec.stride + 0.5))
    start = center - (rows - 1) // 2

    n_cols, n_mels = spec.columns.shape
    grid = np.zeros((rows, n_mels), dtype=spec.columns.dtype)
    lo, hi = max(start, 0), min(start + rows, n_cols)
    if lo < hi:
        grid[lo - start : hi - start] = spec.columns[lo:hi]
    return SubSpectrogram(grid=grid, window_length=w, center_column=center)


def read_wav(path: Union[str, Path]) -> Waveform:
    """PCM 16-bit or float32 WAV; multichannel input is averaged to mono"""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        samples = data.astype(np.float64)
    else:
        raise AffectError(f"unsupported WAV sample type {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path: Union[str, Path], wave: Waveform, pcm16: bool = True) -> Path:
    if pcm16:
        data = np.clip(np.round(wave.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    buffer = io.BytesIO()
    wavfile.write(buffer, wave.sample_rate, data)
    return atomic_write_bytes(path, buffer.getvalue())


def encode_spectrogram(columns: np.ndarray) -> bytes:
    """``MELS`` + u32 rows + u32 cols + little-endian f32 row-major payload"""
    rows, cols = columns.shape
    return SPECTROGRAM_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(columns, dtype="<f4").tobytes()


def decode_spectrogram(payload: bytes) -> np.ndarray:
    if payload[:4] != SPECTROGRAM_MAGIC or len(payload) < 12:
        raise AffectError("not a MELS spectrogram")
    rows, cols = struct.unpack("<II", payload[4:12])
    body = payload[12:]
    if len(body) != rows * cols * 4:
        raise AffectError(f"MELS payload has {len(body)} bytes, expected {rows * cols * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def spectrogram_csv(columns: np.ndarray) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, columns, fmt="%.8g", delimiter=",")
    return buffer.getvalue()
