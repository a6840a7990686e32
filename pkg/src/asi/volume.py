"""Volume data model, intensity normalization, z-degradation, and file I/O.

Volumes are immutable rank-3 float32 grids indexed (z, y, x) with per-axis
physical spacing in millimeters. All operations here are pure functions and
safe to call concurrently.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "Volume",
    "VolumeFormatError",
    "FWHM_PER_SIGMA",
    "normalize_percentile",
    "normalize_minmax",
    "gaussian_blur_z",
    "subsample_z",
    "save_volume",
    "load_volume",
]

# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian profile
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class VolumeFormatError(ValueError):
    """Raised when a volume file or its sidecar is malformed."""


@dataclass(frozen=True)
class Volume:
    """Rank-3 scalar grid with (sz, sy, sx) spacing in mm and a provenance tag.

    Anisotropic inputs are expected (not enforced) to satisfy sz >= sy = sx.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    provenance: str = "original"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be rank 3, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("volume is empty")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        arr = arr.copy() if arr is self.data else arr
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]


def normalize_percentile(vol: Volume, p_lo: float = 1.0, p_hi: float = 99.0) -> Volume:
    """Clamp to the [p_lo, p_hi] percentile values and map affinely to [0, 1].

    Percentiles are computed over the whole volume with linear interpolation
    between order statistics. A degenerate volume (equal percentile values)
    maps to all zeros with a warning instead of raising, so batch pipelines
    survive a blank volume.
    """
    if not (0.0 <= p_lo < p_hi <= 100.0):
        raise ValueError(f"require 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    v_lo, v_hi = np.percentile(vol.data, [p_lo, p_hi], method="linear")
    if v_hi == v_lo:
        warnings.warn("degenerate volume in normalize_percentile; returning zeros", stacklevel=2)
        return Volume(np.zeros_like(vol.data), vol.spacing, vol.provenance)
    out = (np.clip(vol.data, v_lo, v_hi) - v_lo) / (v_hi - v_lo)
    return Volume(out, vol.spacing, vol.provenance)


def normalize_minmax(vol: Volume) -> Volume:
    """Map the full intensity range affinely to [0, 1]; constant volumes map to zeros."""
    v_min = float(vol.data.min())
    v_max = float(vol.data.max())
    if v_max == v_min:
        warnings.warn("constant volume in normalize_minmax; returning zeros", stacklevel=2)
        return Volume(np.zeros_like(vol.data), vol.spacing, vol.provenance)
    return Volume((vol.data - v_min) / (v_max - v_min), vol.spacing, vol.provenance)


def gaussian_kernel_z(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ceil(4*sigma) taps per side, renormalized."""
    radius = int(math.ceil(4.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur_z(vol: Volume, fwhm_mm: float) -> Volume:
    """1-D Gaussian blur along z with mirror boundary.

    sigma in slice units is fwhm_mm / (sz * 2*sqrt(2 ln 2)). A sub-tap sigma
    (kernel collapsing to a single tap) returns the input unchanged.
    """
    if fwhm_mm <= 0:
        raise ValueError(f"fwhm_mm must be positive, got {fwhm_mm}")
    sigma = fwhm_mm / (vol.spacing[0] * FWHM_PER_SIGMA)
    kernel = gaussian_kernel_z(sigma)
    if kernel.size == 1:
        return vol
    blurred = correlate1d(vol.data.astype(np.float64), kernel, axis=0, mode="mirror")
    return Volume(blurred.astype(np.float32), vol.spacing, "blurred")


def subsample_z(vol: Volume, K: int) -> Volume:
    """Keep every K-th slice starting at 0; z spacing is multiplied by K."""
    if K < 2:
        raise ValueError(f"subsampling factor must be >= 2, got {K}")
    if vol.num_slices < K + 1:
        raise ValueError(f"need at least {K + 1} slices to subsample by {K}, got {vol.num_slices}")
    sz, sy, sx = vol.spacing
    return Volume(vol.data[::K].copy(), (sz * K, sy, sx), "subsampled")


# ---------------------------------------------------------------------------
# VOLF file format: <name>.volf raw little-endian float32 payload in z-major
# (z, y, x) order, plus a UTF-8 JSON sidecar <name>.volf.json.


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_volume(vol: Volume, path: str | Path) -> None:
    path = Path(path)
    if path.suffix != ".volf":
        raise ValueError(f"volume path must end in .volf, got {path.name}")
    payload = np.ascontiguousarray(vol.data, dtype="<f4")
    path.write_bytes(payload.tobytes())
    sidecar = {
        "dims": list(vol.data.shape),
        "spacing_mm": list(vol.spacing),
        "provenance": vol.provenance,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar), encoding="utf-8")


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    sidecar_path = _sidecar_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume payload not found: {path}")
    if not sidecar_path.is_file():
        raise FileNotFoundError(f"volume sidecar not found: {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        dims = [int(d) for d in sidecar["dims"]]
        spacing = tuple(float(s) for s in sidecar["spacing_mm"])
        provenance = str(sidecar.get("provenance", "original"))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeFormatError(f"sidecar dims must be three positive integers, got {dims}")
    raw = path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise VolumeFormatError(
            f"payload length {len(raw)} does not match dims {dims} (expected {expected} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"payload of {path} contains non-finite values")
    return Volume(data, spacing, provenance)
