"""Conventional through-plane baseline: exact cubic B-spline interpolation
along z.

The prefilter solves the interpolation system whose interior rows are the
classic {1/6, 4/6, 1/6} band, closed with not-a-knot end conditions (vanishing
fourth coefficient difference). This closure reproduces constant, linear, and
cubic fields exactly, which the synthesized-slice comparisons rely on.
Columns are independent; the banded solve runs vectorized over all (y, x)
positions at once.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .volume import Volume

__all__ = ["bspline_prefilter_z", "bspline_upsample_z"]

_MIN_KNOTS = 4  # not-a-knot closure needs four samples; shorter columns are mirror-padded


def _mirror_pad_z(data: np.ndarray) -> tuple[np.ndarray, int]:
    """Whole-sample mirror padding along z up to the minimum knot count."""
    z = data.shape[0]
    pad = 0
    while z + 2 * pad < _MIN_KNOTS:
        pad += 1
    if pad == 0:
        return data, 0
    top = data[1 : pad + 1][::-1]
    bottom = data[-pad - 1 : -1][::-1]
    return np.concatenate([top, data, bottom], axis=0), pad


def _solve_coefficients(data: np.ndarray) -> np.ndarray:
    """Solve the banded interpolation system for every column at once."""
    z = data.shape[0]
    ab = np.zeros((7, z))  # (l, u) = (3, 3) band storage for solve_banded
    ab[2, 1:] = 1.0 / 6.0   # superdiagonal
    ab[3, :] = 4.0 / 6.0    # diagonal
    ab[4, :-1] = 1.0 / 6.0  # subdiagonal
    # not-a-knot closures: row 0 spans c0..c3, row z-1 spans c[z-4]..c[z-1]
    ab[3, 0], ab[2, 1], ab[1, 2], ab[0, 3] = 8 / 6, -5 / 6, 4 / 6, -1 / 6
    ab[3, z - 1], ab[4, z - 2], ab[5, z - 3], ab[6, z - 4] = 8 / 6, -5 / 6, 4 / 6, -1 / 6
    rhs = data.reshape(z, -1).astype(np.float64)
    coeff = solve_banded((3, 3), ab, rhs)
    return coeff.reshape(data.shape)


def _extended_coefficients(data: np.ndarray) -> tuple[np.ndarray, int]:
    """Coefficients with one cubic-extrapolated slice beyond each end.

    Returns (ce, offset) where ce[offset + i] is the coefficient of knot i of
    the (possibly mirror-padded) input and ce carries c[-1] and c[Z] so the
    boundary segments can be evaluated.
    """
    padded, pad = _mirror_pad_z(data.astype(np.float64))
    c = _solve_coefficients(padded)
    c_lo = 4 * c[0] - 6 * c[1] + 4 * c[2] - c[3]
    c_hi = 4 * c[-1] - 6 * c[-2] + 4 * c[-3] - c[-4]
    ce = np.concatenate([c_lo[None], c, c_hi[None]], axis=0)
    return ce, pad + 1


def bspline_prefilter_z(vol: Volume) -> Volume:
    """Cubic B-spline coefficients per (y, x) column of the volume.

    Interpolation property: (c[i-1] + 4 c[i] + c[i+1]) / 6 equals the input
    sample at every interior knot.
    """
    ce, offset = _extended_coefficients(vol.data)
    coeff = ce[offset : offset + vol.num_slices]
    return Volume(coeff.astype(np.float32), vol.spacing, "coefficients")


def _bspline_weights(f: float) -> tuple[float, float, float, float]:
    """Cubic B-spline weights at knot offsets (-1, 0, 1, 2) for fraction f."""
    f2, f3 = f * f, f * f * f
    return (
        (1.0 - f) ** 3 / 6.0,
        (4.0 - 6.0 * f2 + 3.0 * f3) / 6.0,
        (1.0 + 3.0 * f + 3.0 * f2 - 3.0 * f3) / 6.0,
        f3 / 6.0,
    )


def bspline_upsample_z(vol: Volume, K: int, clamp: bool = True) -> Volume:
    """Evaluate the interpolating cubic B-spline at positions j/K along z.

    The output has (Z-1)*K + 1 slices, matching the latent-interpolation
    assembly contract so per-slice comparisons pair up. Cubic splines can
    overshoot, so values are clamped to [0, 1] by default; the provenance tag
    records when clamping actually changed anything.
    """
    if K < 2:
        raise ValueError(f"upsampling factor must be >= 2, got {K}")
    if vol.num_slices < 2:
        raise ValueError(f"need at least 2 slices to upsample, got {vol.num_slices}")
    z_in = vol.num_slices
    ce, offset = _extended_coefficients(vol.data)

    z_out = (z_in - 1) * K + 1
    out = np.empty((z_out,) + vol.data.shape[1:], dtype=np.float64)
    for j in range(z_out):
        i, f = divmod(j, K)
        frac = f / K
        base = offset + i
        if f == 0:
            out[j] = (ce[base - 1] + 4.0 * ce[base] + ce[base + 1]) / 6.0
        else:
            w = _bspline_weights(frac)
            out[j] = w[0] * ce[base - 1] + w[1] * ce[base] + w[2] * ce[base + 1] + w[3] * ce[base + 2]

    provenance = "upsampled"
    if clamp:
        clipped = np.clip(out, 0.0, 1.0)
        if not np.array_equal(clipped, out):
            provenance = "upsampled+clamped"
        out = clipped
    sz, sy, sx = vol.spacing
    return Volume(out.astype(np.float32), (sz / K, sy, sx), provenance)
