"""Forward-only two-stream network built from (2+1)D and 2D convolutions

Tensors follow the N x C x T x H x W layout for the visual stream and
N x C x H x W for the aural stream. Everything is computed in float64 with
numpy; weights are stored as little-endian float32.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..config import StreamMode, TwoStreamConfig
from ..utils.storage import atomic_write_bytes, read_json, write_json
from .errors import AffectError, ShapeError

logger = logging.getLogger(__name__)

Activation = Literal["relu", "linear"]
Triple = Tuple[int, int, int]

NUM_VA = 2
NUM_EX = 7


def _triple(value: Union[int, Sequence[int]], name: str) -> Triple:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValueError(f"{name} needs three entries, got {value}")
    return value


def _activate(x: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "linear":
        return x
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class Conv3dSpec:
    """Layer geometry for a 3D cross-correlation"""

    in_channels: int
    out_channels: int
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel {self.kernel} and stride {self.stride} must be positive")
        if min(self.padding) < 0:
            raise ValueError(f"padding {self.padding} must be nonnegative")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def output_shape(self, t: int, h: int, w: int) -> Triple:
        sizes = []
        for name, n, k, s, p in zip(("time", "height", "width"), (t, h, w), self.kernel, self.stride, self.padding):
            if n + 2 * p < k:
                raise ShapeError(name, f">= {k - 2 * p}", n)
            sizes.append((n + 2 * p - k) // s + 1)
        return tuple(sizes)


def conv3d_direct(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
    padding: Union[int, Sequence[int]] = 0,
) -> np.ndarray:
    """Full 3D cross-correlation with zero padding, N x C x T x H x W -> N x O x T' x H' x W'"""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError("input rank", 5, x.ndim)
    if weight.ndim != 5:
        raise ShapeError("weight rank", 5, weight.ndim)
    out_channels, in_channels = weight.shape[:2]
    if x.shape[1] != in_channels:
        raise ShapeError("in_channels", in_channels, x.shape[1])
    if bias is not None and np.shape(bias) != (out_channels,):
        raise ShapeError("bias", (out_channels,), np.shape(bias))

    spec = Conv3dSpec(in_channels, out_channels, weight.shape[2:], _triple(stride, "stride"), _triple(padding, "padding"))
    spec.output_shape(*x.shape[2:])
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride

    padded = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, spec.kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    out = np.tensordot(windows, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None, None]
    return np.ascontiguousarray(out)


def conv2d_direct(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: Union[int, Sequence[int]] = 1,
    padding: Union[int, Sequence[int]] = 0,
) -> np.ndarray:
    """2D cross-correlation N x C x H x W, computed as a 3D one with unit depth"""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError("input rank", 4, x.ndim)
    if weight.ndim != 4:
        raise ShapeError("weight rank", 4, weight.ndim)
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    out = conv3d_direct(x[:, :, None], weight[:, :, None], bias, (1, sh, sw), (0, ph, pw))
    return out[:, :, 0]


def midplanes(t: int, d: int, n_in: int, n_out: int) -> int:
    """Intermediate channels M matching the parameter budget of a t x d x d kernel"""
    if min(t, d, n_in, n_out) < 1:
        raise ValueError("midplanes arguments must be >= 1")
    return (t * d * d * n_in * n_out) // (d * d * n_in + t * n_out)


def conv3d_param_count(t: int, d: int, n_in: int, n_out: int, bias: bool = False) -> int:
    return t * d * d * n_in * n_out + (n_out if bias else 0)


def conv2plus1d_param_count(t: int, d: int, n_in: int, n_out: int, bias: bool = False) -> int:
    m = midplanes(t, d, n_in, n_out)
    count = d * d * n_in * m + t * m * n_out
    if bias:
        count += m + n_out
    return count


def conv2plus1d(
    x: np.ndarray,
    spatial_weight: np.ndarray,
    spatial_bias: Optional[np.ndarray],
    temporal_weight: np.ndarray,
    temporal_bias: Optional[np.ndarray],
    stride: Union[int, Sequence[int]] = 1,
    padding: Union[int, Sequence[int]] = 0,
    activation: Activation = "relu",
) -> np.ndarray:
    """Spatial (1, kh, kw) conv to M channels, activation, temporal (t, 1, 1) conv M -> out

    Stride and padding are given for the equivalent full 3D kernel and split
    between the two convolutions.
    """
    spatial_weight = np.asarray(spatial_weight, dtype=np.float64)
    temporal_weight = np.asarray(temporal_weight, dtype=np.float64)
    if spatial_weight.ndim != 5 or spatial_weight.shape[2] != 1:
        raise ShapeError("spatial kernel", "M x C x 1 x kh x kw", spatial_weight.shape)
    if temporal_weight.ndim != 5 or temporal_weight.shape[3:] != (1, 1):
        raise ShapeError("temporal kernel", "O x M x t x 1 x 1", temporal_weight.shape)
    if temporal_weight.shape[1] != spatial_weight.shape[0]:
        raise ShapeError("midplanes", spatial_weight.shape[0], temporal_weight.shape[1])

    st, sh, sw = _triple(stride, "stride")
    pt, ph, pw = _triple(padding, "padding")
    mid = conv3d_direct(x, spatial_weight, spatial_bias, (1, sh, sw), (0, ph, pw))
    mid = _activate(mid, activation)
    return conv3d_direct(mid, temporal_weight, temporal_bias, (st, 1, 1), (pt, 0, 0))


def _layer_midplanes(kernel: Triple, n_in: int, n_out: int) -> int:
    t, kh, kw = kernel
    d = int(round(math.sqrt(kh * kw)))
    return max(midplanes(t, d, n_in, n_out), 1)


def _factorized_shapes(prefix: str, n_in: int, n_out: int, kernel: Triple) -> Dict[str, Tuple[int, ...]]:
    t, kh, kw = kernel
    m = _layer_midplanes(kernel, n_in, n_out)
    return {
        f"{prefix}.spatial.weight": (m, n_in, 1, kh, kw),
        f"{prefix}.spatial.bias": (m,),
        f"{prefix}.temporal.weight": (n_out, m, t, 1, 1),
        f"{prefix}.temporal.bias": (n_out,),
    }


def _stage_channels(base: int, blocks: int) -> List[Tuple[int, int, bool]]:
    """(in, out, downsample) per residual block; the first block doubles width"""
    stages = []
    channels = base
    for i in range(blocks):
        out = base * 2
        stages.append((channels, out, i == 0))
        channels = out
    return stages


def layer_shapes(cfg: TwoStreamConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every weight and bias, in manifest order"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    base = cfg.base_channels

    shapes.update(_factorized_shapes("visual.stem", cfg.visual_in_channels, base, cfg.visual_stem_kernel))
    for i, (n_in, n_out, down) in enumerate(_stage_channels(base, cfg.visual_blocks)):
        prefix = f"visual.block{i}"
        shapes.update(_factorized_shapes(f"{prefix}.conv1", n_in, n_out, (3, 3, 3)))
        shapes.update(_factorized_shapes(f"{prefix}.conv2", n_out, n_out, (3, 3, 3)))
        if down or n_in != n_out:
            shapes[f"{prefix}.shortcut.weight"] = (n_out, n_in, 1, 1, 1)
            shapes[f"{prefix}.shortcut.bias"] = (n_out,)

    kh, kw = cfg.aural_stem_kernel
    shapes["aural.stem.weight"] = (base, cfg.aural_in_channels, kh, kw)
    shapes["aural.stem.bias"] = (base,)
    for i, (n_in, n_out, down) in enumerate(_stage_channels(base, cfg.aural_blocks)):
        prefix = f"aural.block{i}"
        shapes[f"{prefix}.conv1.weight"] = (n_out, n_in, 3, 3)
        shapes[f"{prefix}.conv1.bias"] = (n_out,)
        shapes[f"{prefix}.conv2.weight"] = (n_out, n_out, 3, 3)
        shapes[f"{prefix}.conv2.bias"] = (n_out,)
        if down or n_in != n_out:
            shapes[f"{prefix}.shortcut.weight"] = (n_out, n_in, 1, 1)
            shapes[f"{prefix}.shortcut.bias"] = (n_out,)

    shapes["head.weight"] = (cfg.head_width, cfg.feature_dim)
    shapes["head.bias"] = (cfg.head_width,)
    return shapes


def count_params(cfg: TwoStreamConfig) -> int:
    """Exact number of scalars in the network, biases included"""
    return sum(math.prod(shape) for shape in layer_shapes(cfg).values())


def head_param_count(feature_dim: int, head_width: int) -> int:
    return (feature_dim + 1) * head_width


@dataclass(frozen=True, eq=False)
class WeightManifest:
    """Named weight blobs plus the seed they were generated from"""

    blobs: Dict[str, np.ndarray]
    seed: Optional[int] = None
    names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.names:
            object.__setattr__(self, "names", tuple(self.blobs))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.blobs[name]
        except KeyError:
            raise AffectError(f"weight manifest has no blob {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.blobs

    @property
    def num_params(self) -> int:
        return sum(int(b.size) for b in self.blobs.values())

    def check(self, cfg: TwoStreamConfig) -> None:
        """Every layer of the config must have exactly one blob of matching shape"""
        expected = layer_shapes(cfg)
        missing = [n for n in expected if n not in self.blobs]
        extra = [n for n in self.blobs if n not in expected]
        if missing or extra:
            raise AffectError(f"weight manifest mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.blobs[name].shape != shape:
                raise ShapeError(name, shape, self.blobs[name].shape)

    def index(self) -> List[Dict[str, object]]:
        entries = []
        offset = 0
        for name in self.names:
            blob = self.blobs[name]
            entries.append({"name": name, "shape": list(blob.shape), "offset": offset})
            offset += blob.size * 4
        return entries


def init_weights(cfg: TwoStreamConfig, seed: int = 0) -> WeightManifest:
    """He-normal weights and small biases from a fixed seed, float32-representable"""
    rng = np.random.default_rng(seed)
    blobs: Dict[str, np.ndarray] = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".bias"):
            values = rng.uniform(-0.01, 0.01, size=shape)
        else:
            fan_in = math.prod(shape[1:])
            values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        blobs[name] = values.astype(np.float32).astype(np.float64)
    return WeightManifest(blobs=blobs, seed=seed)


def zero_weights(cfg: TwoStreamConfig) -> WeightManifest:
    return WeightManifest(blobs={name: np.zeros(shape) for name, shape in layer_shapes(cfg).items()})


def save_weights(stem: Union[str, Path], weights: WeightManifest) -> Path:
    """Write ``<stem>.json`` (name, shape, byte offset) and ``<stem>.bin`` (f32 LE)"""
    stem = Path(stem)
    payload = b"".join(np.ascontiguousarray(weights.blobs[n], dtype="<f4").tobytes() for n in weights.names)
    atomic_write_bytes(stem.with_suffix(".bin"), payload)
    return write_json(
        stem.with_suffix(".json"),
        {"seed": weights.seed, "dtype": "<f4", "blob": stem.with_suffix(".bin").name, "tensors": weights.index()},
    )


def load_weights(stem: Union[str, Path], cfg: Optional[TwoStreamConfig] = None) -> WeightManifest:
    stem = Path(stem)
    index = read_json(stem.with_suffix(".json"))
    payload = (stem.parent / index.get("blob", stem.with_suffix(".bin").name)).read_bytes()
    blobs: Dict[str, np.ndarray] = {}
    for entry in index["tensors"]:
        shape = tuple(entry["shape"])
        start = int(entry["offset"])
        end = start + math.prod(shape) * 4
        if end > len(payload):
            raise AffectError(f"weight blob {entry['name']} runs past the end of {len(payload)} bytes")
        blobs[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).astype(np.float64)
    weights = WeightManifest(blobs=blobs, seed=index.get("seed"))
    if cfg is not None:
        weights.check(cfg)
    return weights


def _factorized(x: np.ndarray, w: WeightManifest, prefix: str, stride: Triple, padding: Triple) -> np.ndarray:
    return conv2plus1d(
        x,
        w[f"{prefix}.spatial.weight"],
        w[f"{prefix}.spatial.bias"],
        w[f"{prefix}.temporal.weight"],
        w[f"{prefix}.temporal.bias"],
        stride,
        padding,
    )


def visual_features(x: np.ndarray, cfg: TwoStreamConfig, w: WeightManifest) -> np.ndarray:
    """N x 4 x T x H x W -> N x F_v after the residual stack and global average pooling"""
    if x.shape[1] != cfg.visual_in_channels:
        raise ShapeError("visual channels", cfg.visual_in_channels, x.shape[1])
    out = _factorized(x, w, "visual.stem", cfg.visual_stem_stride, cfg.visual_stem_padding)
    out = np.maximum(out, 0.0)
    for i, (n_in, n_out, down) in enumerate(_stage_channels(cfg.base_channels, cfg.visual_blocks)):
        prefix = f"visual.block{i}"
        stride = cfg.visual_block_stride if down else (1, 1, 1)
        residual = np.maximum(_factorized(out, w, f"{prefix}.conv1", stride, (1, 1, 1)), 0.0)
        residual = _factorized(residual, w, f"{prefix}.conv2", (1, 1, 1), (1, 1, 1))
        if f"{prefix}.shortcut.weight" in w:
            shortcut = conv3d_direct(out, w[f"{prefix}.shortcut.weight"], w[f"{prefix}.shortcut.bias"], stride)
        else:
            shortcut = out
        out = np.maximum(residual + shortcut, 0.0)
    return out.mean(axis=(2, 3, 4))


def aural_features(x: np.ndarray, cfg: TwoStreamConfig, w: WeightManifest) -> np.ndarray:
    """N x 1 x rows x n_mels -> N x F_a"""
    if x.shape[1] != cfg.aural_in_channels:
        raise ShapeError("aural channels", cfg.aural_in_channels, x.shape[1])
    out = conv2d_direct(x, w["aural.stem.weight"], w["aural.stem.bias"], cfg.aural_stem_stride, cfg.aural_stem_padding)
    out = np.maximum(out, 0.0)
    for i, (n_in, n_out, down) in enumerate(_stage_channels(cfg.base_channels, cfg.aural_blocks)):
        prefix = f"aural.block{i}"
        stride = cfg.aural_block_stride if down else (1, 1)
        residual = conv2d_direct(out, w[f"{prefix}.conv1.weight"], w[f"{prefix}.conv1.bias"], stride, 1)
        residual = conv2d_direct(np.maximum(residual, 0.0), w[f"{prefix}.conv2.weight"], w[f"{prefix}.conv2.bias"], 1, 1)
        if f"{prefix}.shortcut.weight" in w:
            shortcut = conv2d_direct(out, w[f"{prefix}.shortcut.weight"], w[f"{prefix}.shortcut.bias"], stride)
        else:
            shortcut = out
        out = np.maximum(residual + shortcut, 0.0)
    return out.mean(axis=(2, 3))


def _visual_input(clip) -> np.ndarray:
    tensor = np.asarray(getattr(clip, "tensor", clip), dtype=np.float64)
    if tensor.ndim != 4:
        raise ShapeError("clip rank", 4, tensor.ndim)
    # l x H x W x C -> 1 x C x l x H x W
    return np.transpose(tensor, (3, 0, 1, 2))[None]


def _aural_input(sub) -> np.ndarray:
    grid = np.asarray(getattr(sub, "grid", sub), dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError("sub-spectrogram rank", 2, grid.ndim)
    return grid[None, None]


def two_stream_forward(
    clip,
    sub,
    cfg: TwoStreamConfig,
    weights: WeightManifest,
    stream_mode: StreamMode = "both",
) -> np.ndarray:
    """Prediction vector [v, a, 7 EX logits, K AU logits]; v and a squashed by tanh

    ``clip`` is a Clip or an l x H x W x 4 array, ``sub`` a SubSpectrogram or a
    rows x n_mels array. A disabled stream contributes a zero feature block.
    """
    if stream_mode not in ("both", "visual", "aural"):
        raise ValueError(f"unknown stream mode {stream_mode!r}")

    if stream_mode == "aural":
        visual = np.zeros((1, cfg.visual_feature_dim))
    else:
        visual = visual_features(_visual_input(clip), cfg, weights)
    if stream_mode == "visual":
        aural = np.zeros((1, cfg.aural_feature_dim))
    else:
        aural = aural_features(_aural_input(sub), cfg, weights)

    features = np.concatenate([visual, aural], axis=1)[0]
    out = weights["head.weight"] @ features + weights["head.bias"]
    out[:NUM_VA] = np.tanh(out[:NUM_VA])
    return out


def split_prediction(vector: np.ndarray, n_au: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a head output into (va, ex_logits, au_logits)"""
    vector = np.asarray(vector)
    width = NUM_VA + NUM_EX + n_au
    if vector.shape[-1] != width:
        raise ShapeError("head width", width, vector.shape[-1])
    return vector[..., :NUM_VA], vector[..., NUM_VA : NUM_VA + NUM_EX], vector[..., NUM_VA + NUM_EX :]

