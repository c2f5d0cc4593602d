"""Configuration handling for the affect pipeline and its tool server"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .affect.errors import ConfigError
from .affect.labelfusion import POLICY_ALIASES

PseudoPolicy = Literal["none", "valence", "va", "va+ex"]
StreamMode = Literal["both", "visual", "aural"]


class MelConfig(BaseModel):
    """Mel spectrogram settings"""

    n_mels: int = Field(default=64, ge=1, description="Number of triangular mel filters")
    window: float = Field(default=0.020, gt=0, description="Analysis window length in seconds")
    stride: float = Field(default=0.010, gt=0, description="Hop between columns in seconds")
    n_fft: int = Field(default=1024, ge=2, description="FFT size in bins")
    sample_rate: int = Field(default=41000, gt=0, description="Expected waveform rate in Hz")

    @field_validator("n_fft")
    @classmethod
    def power_of_two(cls, v: int) -> int:
        """Require a power-of-two FFT size"""
        if v & (v - 1):
            raise ValueError(f"n_fft must be a power of two, got {v}")
        return v

    @model_validator(mode="after")
    def check_window(self) -> "MelConfig":
        if self.n_fft < self.win_samples:
            raise ValueError(f"n_fft={self.n_fft} shorter than window of {self.win_samples} samples")
        if self.stride > self.window:
            raise ValueError("stride must not exceed window")
        return self

    @property
    def win_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.stride * self.sample_rate))


class ClipConfig(BaseModel):
    """Visual clip sampling settings"""

    model_config = ConfigDict(populate_by_name=True)

    length: int = Field(default=8, ge=1, alias="l", description="Frames per clip")
    dilation: int = Field(default=6, ge=1, alias="d", description="Dilation between sampled frames")
    height: int = Field(default=112, ge=1, description="Aligned face height in pixels")
    width: int = Field(default=112, ge=1, description="Aligned face width in pixels")
    fps: int = Field(default=30, ge=1, description="Video frame rate")


class MaskConfig(BaseModel):
    """Landmark mask rendering settings"""

    thickness: float = Field(default=2.0, gt=0, description="Stroke thickness in pixels")
    antialias: float = Field(default=1.0, gt=0, description="Width of the anti-aliased fringe in pixels")
    use_mask: bool = Field(default=True, description="Zero the mask channel when disabled")


class TwoStreamConfig(BaseModel):
    """Toy two-stream network architecture"""

    base_channels: int = Field(default=16, ge=1)
    visual_blocks: int = Field(default=1, ge=0)
    aural_blocks: int = Field(default=1, ge=0)
    n_au: int = Field(default=8, ge=1, description="Number of action unit outputs")
    visual_in_channels: int = Field(default=4, description="Face RGB plus mask")
    aural_in_channels: int = Field(default=1, description="Single spectrogram plane")
    visual_stem_kernel: Tuple[int, int, int] = (3, 7, 7)
    visual_stem_stride: Tuple[int, int, int] = (1, 2, 2)
    visual_stem_padding: Tuple[int, int, int] = (1, 3, 3)
    visual_block_stride: Tuple[int, int, int] = (2, 2, 2)
    aural_stem_kernel: Tuple[int, int] = (7, 7)
    aural_stem_stride: Tuple[int, int] = (2, 2)
    aural_stem_padding: Tuple[int, int] = (3, 3)
    aural_block_stride: Tuple[int, int] = (2, 2)

    @property
    def head_width(self) -> int:
        return 2 + 7 + self.n_au

    @property
    def visual_feature_dim(self) -> int:
        return self.base_channels * (2 if self.visual_blocks else 1)

    @property
    def aural_feature_dim(self) -> int:
        return self.base_channels * (2 if self.aural_blocks else 1)

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated visual and aural features"""
        return self.visual_feature_dim + self.aural_feature_dim


class PathsConfig(BaseModel):
    """Input and output locations of a pipeline run"""

    annotations: str = Field(description="Directory with VA/, EX/ and AU/ annotation files")
    landmarks: str = Field(description="Directory with per-video landmark CSV files")
    frames: str = Field(description="Directory with per-video source frame images")
    audio: str = Field(description="Directory with per-video WAV files")
    output: str = Field(description="Directory receiving all artifacts")

    @staticmethod
    def corpus_layout(corpus_dir: str) -> Dict[str, str]:
        """Input paths of the standard layout written by the synthetic generator"""
        root = Path(corpus_dir)
        return {name: str(root / name) for name in ("annotations", "landmarks", "frames", "audio")}

    @classmethod
    def for_corpus(cls, corpus_dir: str, output_dir: str) -> "PathsConfig":
        return cls(output=output_dir, **cls.corpus_layout(corpus_dir))


class PipelineConfig(BaseModel):
    """Full configuration of a reproducible pipeline run"""

    paths: PathsConfig
    mel: MelConfig = Field(default_factory=MelConfig)
    clip: ClipConfig = Field(default_factory=ClipConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    network: TwoStreamConfig = Field(default_factory=TwoStreamConfig)
    pseudo: PseudoPolicy = Field(default="valence", description="Pseudo label policy")
    filter: bool = Field(default=True, description="Exclude contradictory annotations")
    bins: int = Field(default=20, ge=1, description="Histogram bins per axis")
    seed: int = Field(default=0, description="Seed for every random draw of the run")
    jobs: int = Field(default=1, ge=1, description="Worker threads for per-video stages")
    subspec_seconds: float = Field(default=10.0, gt=0, description="Sub-spectrogram length w")
    forward_stride: int = Field(default=10, ge=1, description="Evaluate every k-th frame")
    stream_mode: StreamMode = Field(default="both")
    augment: bool = Field(default=False, description="Apply clip-level augmentation before the forward pass")
    write_clips: bool = Field(default=False, description="Persist every sampled clip as CLP4")
    spectrogram_csv: bool = Field(default=False, description="Also export spectrograms as CSV")

    @field_validator("pseudo", mode="before")
    @classmethod
    def normalize_policy(cls, v: Any) -> Any:
        return POLICY_ALIASES.get(v, v) if isinstance(v, str) else v

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "PipelineConfig":
        """Load configuration from a JSON file and apply flag overrides (flags win)"""
        data: Dict[str, Any] = {}
        if path:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must contain a JSON object")

        if "jobs" not in data and os.environ.get("AFFECT_JOBS"):
            data["jobs"] = os.environ["AFFECT_JOBS"]

        merged = _deep_merge(data, overrides or {})
        try:
            return cls.model_validate(merged)
        except ValidationError as e:
            raise ConfigError(str(e)) from e


def _deep_merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for key, value in updates.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = out.get(key)
            out[key] = _deep_merge(current if isinstance(current, dict) else {}, value)
        else:
            out[key] = value
    return out


class ServerConfig(BaseModel):
    """Tool server configuration"""

    config_dir: str = Field(description="Configuration directory path")
    log_level: str = Field(default="INFO", description="Root logging level")

    @field_validator("config_dir")
    @classmethod
    def create_config_dir(cls, v: str) -> str:
        """Create config directory if it doesn't exist"""
        Path(v).mkdir(parents=True, exist_ok=True)
        return v

    @classmethod
    def from_env(cls) -> "ServerConfig":
        """Load configuration from environment variables"""
        # Load .env file if it exists
        load_dotenv()

        config_dir = os.environ.get("AFFECT_CONFIG_DIR", str(Path.home() / ".avaffect"))
        return cls(
            config_dir=config_dir,
            log_level=os.environ.get("AFFECT_LOG_LEVEL", "INFO"),
        )
