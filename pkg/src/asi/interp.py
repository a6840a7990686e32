"""Latent-space interpolation: mixing-coefficient sets, convex combination of
slice codes, in-between slice synthesis, and through-plane volume upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .model import LatentCode, ModelParams, decode, encode
from .volume import Volume

__all__ = [
    "AlphaSet",
    "NumericError",
    "alpha_set",
    "convex_combine",
    "synthesize_between",
    "upsample_volume",
]


class NumericError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


@dataclass(frozen=True)
class AlphaSet:
    """Ordered mixing coefficients {i/K} for i = 1..K-1."""

    values: tuple[float, ...]
    factor: int

    def __post_init__(self):
        if len(self.values) != self.factor - 1:
            raise ValueError("alpha set must contain K-1 coefficients")
        if any(not (0.0 < a < 1.0) for a in self.values):
            raise ValueError("mixing coefficients must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("mixing coefficients must be strictly increasing")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


def alpha_set(K: int) -> AlphaSet:
    """Mixing coefficients for upsampling factor K: {1/K, ..., (K-1)/K}."""
    if K < 2:
        raise ValueError(f"upsampling factor must be >= 2, got {K}")
    return AlphaSet(tuple(i / K for i in range(1, K)), K)


def convex_combine(z_a: LatentCode, z_b: LatentCode, alpha: float) -> LatentCode:
    """(1 - alpha) * z_a + alpha * z_b, with exact endpoints at alpha 0 and 1."""
    if z_a.data.shape != z_b.data.shape:
        raise ValueError(f"latent shape mismatch: {z_a.data.shape} vs {z_b.data.shape}")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"mixing coefficient must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return LatentCode(z_a.data.copy())
    if alpha == 1.0:
        return LatentCode(z_b.data.copy())
    return LatentCode((1.0 - alpha) * z_a.data + alpha * z_b.data)


def _pad_to_multiple4(image: np.ndarray) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Symmetric zero-pad so both spatial dims are divisible by 4."""
    h, w = image.shape
    ph, pw = (-h) % 4, (-w) % 4
    top, left = ph // 2, pw // 2
    bottom, right = ph - top, pw - left
    if ph == 0 and pw == 0:
        return image, (0, 0, 0, 0)
    return np.pad(image, ((top, bottom), (left, right))), (top, bottom, left, right)


def _crop(image: np.ndarray, pad: tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pad
    return image[top : image.shape[0] - bottom or None, left : image.shape[1] - right or None]


def _encode_batch(mp: ModelParams, images: np.ndarray) -> np.ndarray:
    return encode(mp, Tensor(images[:, None]), mode="eval").data


def _decode_batch(mp: ModelParams, codes: np.ndarray) -> np.ndarray:
    out = decode(mp, Tensor(codes), mode="eval").data[:, 0]
    if not np.isfinite(out).all():
        raise NumericError("decoder produced non-finite values")
    return out


def synthesize_between(
    mp: ModelParams, x_n: np.ndarray, x_n1: np.ndarray, alphas: AlphaSet
) -> list[np.ndarray]:
    """Decode the convex combinations of two adjacent slices' codes.

    Returns one image per mixing coefficient, in the order of `alphas`.
    Slices with in-plane dims not divisible by 4 are symmetrically zero-padded
    before encoding and cropped back after decoding.
    """
    x_n = np.asarray(x_n, dtype=np.float32)
    x_n1 = np.asarray(x_n1, dtype=np.float32)
    if x_n.shape != x_n1.shape:
        raise ValueError(f"slice shape mismatch: {x_n.shape} vs {x_n1.shape}")
    a_pad, pad = _pad_to_multiple4(x_n)
    b_pad, _ = _pad_to_multiple4(x_n1)
    codes = _encode_batch(mp, np.stack([a_pad, b_pad]))
    z_a, z_b = LatentCode(codes[0]), LatentCode(codes[1])
    mixed = np.stack([convex_combine(z_a, z_b, a).data for a in alphas])
    decoded = _decode_batch(mp, mixed)
    return [_crop(img, pad) for img in decoded]


def upsample_volume(
    mp: ModelParams,
    vol: Volume,
    K: int,
    reconstruct_originals: bool = False,
    decode_batch: int = 16,
) -> Volume:
    """Upsample a volume by factor K in the through-plane direction.

    The output has (Z-1)*K + 1 slices. Original slices are copied verbatim to
    indices {0, K, 2K, ...} (set `reconstruct_originals` to replace them with
    their autoencoder reconstructions instead, for ablations); the K-1 slices
    between each adjacent pair decode the convex combinations of the pair's
    latent codes. Output z spacing is divided by K; slice thickness is
    whatever the inputs carried.
    """
    if vol.num_slices < 2:
        raise ValueError(f"need at least 2 slices to upsample, got {vol.num_slices}")
    alphas = alpha_set(K)
    z_in, y, x = vol.shape

    padded = [_pad_to_multiple4(vol.data[i]) for i in range(z_in)]
    pad = padded[0][1]
    stack = np.stack([p[0] for p in padded])
    codes = np.concatenate(
        [_encode_batch(mp, stack[i : i + decode_batch]) for i in range(0, z_in, decode_batch)]
    )

    z_out = (z_in - 1) * K + 1
    out = np.empty((z_out, y, x), dtype=np.float32)
    for i in range(z_in):
        out[i * K] = vol.data[i]

    # decode per-pair mixtures in flat batches
    mixes = np.empty((z_in - 1, K - 1) + codes.shape[1:], dtype=np.float32)
    for i in range(z_in - 1):
        for j, a in enumerate(alphas):
            mixes[i, j] = (1.0 - a) * codes[i] + a * codes[i + 1]
    flat = mixes.reshape((-1,) + codes.shape[1:])
    decoded = np.concatenate(
        [_decode_batch(mp, flat[i : i + decode_batch]) for i in range(0, len(flat), decode_batch)]
    )
    for i in range(z_in - 1):
        for j in range(K - 1):
            out[i * K + j + 1] = _crop(decoded[i * (K - 1) + j], pad)

    if reconstruct_originals:
        recon = np.concatenate(
            [_decode_batch(mp, codes[i : i + decode_batch]) for i in range(0, z_in, decode_batch)]
        )
        for i in range(z_in):
            out[i * K] = _crop(recon[i], pad)

    sz, sy, sx = vol.spacing
    return Volume(out, (sz / K, sy, sx), "upsampled")
