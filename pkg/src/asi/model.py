"""Encoder/decoder architecture, weight initialization, and checkpointing.

The encoder stacks two conv blocks (two 3x3 convolutions, batch norm, 2x2
average pooling) of 32 and 64 kernels, then a 128-kernel head convolution and
a final convolution producing the latent code; every convolution except the
final one is followed by a leaky ReLU. The decoder mirrors this with
nearest-neighbor upsampling and ends in a single-kernel convolution plus
sigmoid, so outputs live in (0, 1). Two poolings mean input height and width
must each be divisible by four; the latent code is (latent_channels, H/4, W/4).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    BatchNormStats,
    Parameter,
    Tensor,
    avgpool2,
    batchnorm2d,
    conv2d,
    leaky_relu,
    sigmoid,
    upsample_nearest2,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "LatentCode",
    "CheckpointFormatError",
    "init_std",
    "build_model",
    "encode",
    "decode",
    "reconstruct",
    "encode_image",
    "decode_code",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    base_kernels: int = 32
    latent_channels: int = 128
    leaky_slope: float = 0.2
    input_channels: int = 1

    def __post_init__(self):
        if self.base_kernels < 1 or self.latent_channels < 1 or self.input_channels < 1:
            raise ValueError("kernel/channel counts must be positive")

    def overcomplete_factor(self) -> float:
        """Latent element count over input element count; > 1 means over-complete.

        Two 2x2 poolings shrink each spatial dim by 4, so the ratio is
        latent_channels / (16 * input_channels) independent of image size.
        """
        return self.latent_channels / (16.0 * self.input_channels)


@dataclass(frozen=True)
class LatentCode:
    """Rank-3 latent tensor (latent_channels, H/4, W/4) for a single slice."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"latent code must be rank 3, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("latent code contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape


def _conv_layers(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, C_in, C_out) for every convolution, in forward order."""
    b = cfg.base_kernels
    return [
        ("enc.block1.conv0", cfg.input_channels, b),
        ("enc.block1.conv1", b, b),
        ("enc.block2.conv0", b, 2 * b),
        ("enc.block2.conv1", 2 * b, 2 * b),
        ("enc.head.conv0", 2 * b, 4 * b),
        ("enc.head.conv1", 4 * b, cfg.latent_channels),
        ("dec.block1.conv0", cfg.latent_channels, 2 * b),
        ("dec.block1.conv1", 2 * b, 2 * b),
        ("dec.block2.conv0", 2 * b, b),
        ("dec.block2.conv1", b, b),
        ("dec.head.conv0", b, b),
        ("dec.head.conv1", b, cfg.input_channels),
    ]


def _bn_layers(cfg: ModelConfig) -> list[tuple[str, int]]:
    b = cfg.base_kernels
    return [
        ("enc.block1.bn", b),
        ("enc.block2.bn", 2 * b),
        ("dec.block1.bn", 2 * b),
        ("dec.block2.bn", b),
    ]


class ModelParams:
    """All encoder/decoder parameters plus batch-norm running statistics.

    Parameters iterate in lexicographic name order. Instances are treated as
    immutable once training finishes; eval-mode encode/decode never mutate
    them and may run concurrently.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter], bn_stats: dict[str, BatchNormStats]):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats

    def parameters(self) -> list[Parameter]:
        return [self.params[name] for name in sorted(self.params)]

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def copy(self) -> "ModelParams":
        params = {name: Parameter(name, p.tensor.data.copy()) for name, p in self.params.items()}
        stats = {name: s.copy() for name, s in self.bn_stats.items()}
        return ModelParams(self.config, params, stats)


def init_std(n_incoming: int, leaky_slope: float = 0.2) -> float:
    """Weight init standard deviation 1 / sqrt(n_l * (1 + slope^2))."""
    return 1.0 / np.sqrt(n_incoming * (1.0 + leaky_slope**2))


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Construct freshly initialized parameters, deterministic per seed.

    Conv weights are zero-mean Gaussian with std 1/sqrt(n_l (1 + slope^2)),
    n_l = C_in * 3 * 3 incoming connections; biases start at zero, batch-norm
    gamma at one and beta at zero.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for name, c_in, c_out in _conv_layers(cfg):
        std = init_std(c_in * 9, cfg.leaky_slope)
        weight = rng.normal(0.0, std, size=(c_out, c_in, 3, 3)).astype(np.float32)
        params[f"{name}.weight"] = Parameter(f"{name}.weight", weight)
        params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(c_out, dtype=np.float32))
    bn_stats: dict[str, BatchNormStats] = {}
    for name, channels in _bn_layers(cfg):
        params[f"{name}.gamma"] = Parameter(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        params[f"{name}.beta"] = Parameter(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        bn_stats[name] = BatchNormStats(channels)
    return ModelParams(cfg, params, bn_stats)


def _conv(mp: ModelParams, name: str, x: Tensor) -> Tensor:
    return conv2d(x, mp[f"{name}.weight"].tensor, mp[f"{name}.bias"].tensor)


def _bn(mp: ModelParams, name: str, x: Tensor, mode: str) -> Tensor:
    return batchnorm2d(x, mp[f"{name}.gamma"].tensor, mp[f"{name}.beta"].tensor, mp.bn_stats[name], mode=mode)


def encode(mp: ModelParams, x: Tensor, mode: str = "eval") -> Tensor:
    """Map a batch (B, C, H, W) to latent tensors (B, latent, H/4, W/4)."""
    b, c, h, w = x.data.shape
    if c != mp.config.input_channels:
        raise ValueError(f"expected {mp.config.input_channels} input channels, got {c}")
    if h % 4 or w % 4:
        raise ValueError(f"input spatial dims must be divisible by 4, got {h}x{w}")
    slope = mp.config.leaky_slope
    t = leaky_relu(_conv(mp, "enc.block1.conv0", x), slope)
    t = leaky_relu(_conv(mp, "enc.block1.conv1", t), slope)
    t = avgpool2(_bn(mp, "enc.block1.bn", t, mode))
    t = leaky_relu(_conv(mp, "enc.block2.conv0", t), slope)
    t = leaky_relu(_conv(mp, "enc.block2.conv1", t), slope)
    t = avgpool2(_bn(mp, "enc.block2.bn", t, mode))
    t = leaky_relu(_conv(mp, "enc.head.conv0", t), slope)
    return _conv(mp, "enc.head.conv1", t)  # latent layer: no nonlinearity


def decode(mp: ModelParams, z: Tensor, mode: str = "eval") -> Tensor:
    """Map latent tensors (B, latent, h, w) back to images (B, C, 4h, 4w)."""
    if z.data.shape[1] != mp.config.latent_channels:
        raise ValueError(
            f"expected {mp.config.latent_channels} latent channels, got {z.data.shape[1]}"
        )
    slope = mp.config.leaky_slope
    t = leaky_relu(_conv(mp, "dec.block1.conv0", z), slope)
    t = leaky_relu(_conv(mp, "dec.block1.conv1", t), slope)
    t = upsample_nearest2(_bn(mp, "dec.block1.bn", t, mode))
    t = leaky_relu(_conv(mp, "dec.block2.conv0", t), slope)
    t = leaky_relu(_conv(mp, "dec.block2.conv1", t), slope)
    t = upsample_nearest2(_bn(mp, "dec.block2.bn", t, mode))
    t = leaky_relu(_conv(mp, "dec.head.conv0", t), slope)
    return sigmoid(_conv(mp, "dec.head.conv1", t))


def reconstruct(mp: ModelParams, x: Tensor, mode: str = "eval") -> Tensor:
    return decode(mp, encode(mp, x, mode), mode)


def encode_image(mp: ModelParams, image: np.ndarray, mode: str = "eval") -> LatentCode:
    """Encode a single 2-D slice (H, W) to its latent code."""
    x = Tensor(np.asarray(image, dtype=np.float32)[None, None])
    return LatentCode(encode(mp, x, mode).data[0])


def decode_code(mp: ModelParams, code: LatentCode, mode: str = "eval") -> np.ndarray:
    """Decode a single latent code back to a 2-D slice."""
    z = Tensor(code.data[None])
    return decode(mp, z, mode).data[0, 0]


# ---------------------------------------------------------------------------
# ASCK checkpoint format: magic "ASCK1", little-endian uint64 manifest length,
# UTF-8 JSON manifest (config, entry names/shapes/dtypes/offsets), raw
# little-endian payloads.

_MAGIC = b"ASCK1"


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed or incomplete."""


def _entries(mp: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = [(name, mp.params[name].tensor.data) for name in sorted(mp.params)]
    for name in sorted(mp.bn_stats):
        out.append((f"{name}.running_mean", mp.bn_stats[name].mean))
        out.append((f"{name}.running_var", mp.bn_stats[name].var))
    return out


def _expected_names(cfg: ModelConfig) -> set[str]:
    names = set()
    for name, _, _ in _conv_layers(cfg):
        names.add(f"{name}.weight")
        names.add(f"{name}.bias")
    for name, _ in _bn_layers(cfg):
        names.update({f"{name}.gamma", f"{name}.beta", f"{name}.running_mean", f"{name}.running_var"})
    return names


def save_checkpoint(mp: ModelParams, path: str | Path) -> None:
    path = Path(path)
    entries = _entries(mp)
    manifest_entries = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest_entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": asdict(mp.config), "entries": manifest_entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointFormatError(f"{path}: missing ASCK1 magic")
    (manifest_len,) = struct.unpack_from("<Q", raw, len(_MAGIC))
    header_end = len(_MAGIC) + 8
    if header_end + manifest_len > len(raw):
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[header_end : header_end + manifest_len].decode("utf-8"))
        cfg = ModelConfig(**manifest["config"])
        entries = manifest["entries"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc

    payload = raw[header_end + manifest_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: entry {name} exceeds payload")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype.newbyteorder("<"))
        arrays[name] = arr.astype(dtype, copy=True).reshape(shape)

    missing = _expected_names(cfg) - set(arrays)
    if missing:
        raise CheckpointFormatError(f"{path}: missing parameters {sorted(missing)}")

    params = {}
    for name, c_in, c_out in _conv_layers(cfg):
        for suffix in ("weight", "bias"):
            full = f"{name}.{suffix}"
            params[full] = Parameter(full, arrays[full])
    bn_stats = {}
    for name, channels in _bn_layers(cfg):
        for suffix in ("gamma", "beta"):
            full = f"{name}.{suffix}"
            params[full] = Parameter(full, arrays[full])
        stats = BatchNormStats(channels)
        stats.mean[:] = arrays[f"{name}.running_mean"]
        stats.var[:] = arrays[f"{name}.running_var"]
        bn_stats[name] = stats
    return ModelParams(cfg, params, bn_stats)
