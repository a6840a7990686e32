"""Image-quality metrics and the one-sided Wilcoxon signed-rank test.

All metrics are pure functions on 2-D images scaled to [0, 1] and are
embarrassingly parallel across slices. The report container serializes to
CSV (one row per slice) and JSON (aggregates plus paired tests).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d
from scipy.stats import norm

__all__ = [
    "SliceMetrics",
    "MetricReport",
    "PSNR_CSV_CAP_DB",
    "ssim",
    "psnr",
    "vif_p",
    "wilcoxon_one_sided",
    "evaluate_volume",
]

# PSNR of identical images is +inf; tabular output caps it and flags the row.
PSNR_CSV_CAP_DB = 99.0


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window of odd width `size`."""
    taps = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _window_stats(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of `img` with `window` (both float64)."""
    kh, kw = window.shape
    view = sliding_window_view(img, (kh, kw))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity, 11x11 Gaussian window sigma 1.5.

    Uses the standard constants K1=0.01, K2=0.03 and Gaussian-weighted
    (population) moments over valid window positions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got shape {a.shape}")
    if min(a.shape) < 11:
        raise ValueError(f"image {a.shape} smaller than the 11x11 ssim window")
    window = gaussian_window(11, 1.5)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _window_stats(a, window)
    mu_b = _window_stats(b, window)
    var_a = _window_stats(a * a, window) - mu_a * mu_a
    var_b = _window_stats(b * b, window) - mu_b * mu_b
    cov = _window_stats(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(data_range^2 / MSE) in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


# Pixel-domain multi-scale VIF window sizes and their sigmas (N/5).
_VIF_WINDOWS = [2 ** (5 - s) + 1 for s in range(1, 5)]  # 17, 9, 5, 3


def _vif_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _smooth_reflect(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel1d, axis=0, mode="mirror")
    return correlate1d(out, kernel1d, axis=1, mode="mirror")


def vif_p(reference: np.ndarray, distorted: np.ndarray, sigma_nsq: float = 2.0) -> float:
    """Pixel-domain multi-scale visual information fidelity.

    Four scales; at scale s the window is Gaussian with sigma N_s/5 for
    N_s in {17, 9, 5, 3}, truncated at 3 sigma (width 2*ceil(3 sigma)+1).
    Pyramid reduction smooths (mirror boundary) and decimates by 2;
    statistics use valid windows. Variance floor 1e-10. Values can exceed 1
    for contrast-enhanced images; that is inherent to the measure.
    """
    ref = np.asarray(reference, dtype=np.float64)
    dist = np.asarray(distorted, dtype=np.float64)
    if ref.shape != dist.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {dist.shape}")
    if ref.ndim != 2:
        raise ValueError(f"vif_p expects 2-D images, got shape {ref.shape}")
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale, n_win in enumerate(_VIF_WINDOWS, start=1):
        sigma = n_win / 5.0
        kernel = _vif_kernel(sigma)
        if scale > 1:
            taps = kernel.sum(axis=0)  # separable 1-D profile
            ref = _smooth_reflect(ref, taps)[::2, ::2]
            dist = _smooth_reflect(dist, taps)[::2, ::2]
        if ref.shape[0] < kernel.shape[0] or ref.shape[1] < kernel.shape[1]:
            raise ValueError(
                f"image too small for vif_p: {ref.shape} at scale {scale} "
                f"needs at least {kernel.shape[0]} pixels per side"
            )
        mu1 = _window_stats(ref, kernel)
        mu2 = _window_stats(dist, kernel)
        sigma1_sq = np.maximum(_window_stats(ref * ref, kernel) - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(_window_stats(dist * dist, kernel) - mu2 * mu2, 0.0)
        sigma12 = _window_stats(ref * dist, kernel) - mu1 * mu2

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12
        g = np.where(sigma1_sq < eps, 0.0, g)
        sv_sq = np.where(sigma1_sq < eps, sigma2_sq, sv_sq)
        sv_sq = np.where(g < 0.0, sigma2_sq, sv_sq)
        g = np.maximum(g, 0.0)
        sv_sq = np.maximum(sv_sq, eps)

        num += float(np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + sigma_nsq))))
        den += float(np.sum(np.log10(1.0 + sigma1_sq / sigma_nsq)))
    if den == 0.0:
        # featureless reference carries no information in this model
        return 1.0
    return num / den


def _exact_tail(ranks2: np.ndarray, w2_obs: int, alternative: str) -> float:
    """Tail probability of the signed-rank sum via its exact distribution.

    `ranks2` are doubled midranks (integers); the distribution of the doubled
    positive-rank sum is built by polynomial convolution over all 2^n sign
    assignments, which is exact including midranked ties.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    if alternative == "greater":
        return float(counts[w2_obs:].sum())
    return float(counts[: w2_obs + 1].sum())


def wilcoxon_one_sided(diffs, alternative: str = "greater") -> tuple[float, float]:
    """One-sided Wilcoxon signed-rank test on paired differences.

    Returns (W, p) where W is the rank sum of positive differences. Zero
    differences are dropped and tied magnitudes receive midranks. The exact
    null distribution is used for n <= 25 signed pairs; beyond that, the
    normal approximation with continuity correction and tie-corrected
    variance. `alternative="greater"` tests for a positive location shift.
    """
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("diffs must be one-dimensional")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero; the test is undefined")

    order = np.abs(d)
    sorter = np.argsort(order, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_abs = order[sorter]
    i = 0
    pos = 1
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[sorter[i : j + 1]] = (pos + (pos + (j - i))) / 2.0
        pos += j - i + 1
        i = j + 1

    w_plus = float(ranks[d > 0].sum())

    if n <= 25:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_plus))
        p = _exact_tail(ranks2, w2, alternative)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(sorted_abs, return_counts=True)
        var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        sd = math.sqrt(var)
        if alternative == "greater":
            p = float(norm.sf((w_plus - mean - 0.5) / sd))
        else:
            p = float(norm.cdf((w_plus - mean + 0.5) / sd))
    return w_plus, min(max(p, np.nextafter(0.0, 1.0)), 1.0)


# ---------------------------------------------------------------------------
# per-volume evaluation and report container


@dataclass(frozen=True)
class SliceMetrics:
    item_id: str
    ssim: float
    psnr: float
    vif: float
    mse: float


@dataclass
class MetricReport:
    """Per-slice metric rows, their aggregates, and paired-test results.

    `extras` carries experiment-level summaries (per-method means etc.) and
    is serialized alongside the aggregates.
    """

    per_item: list[SliceMetrics] = field(default_factory=list)
    comparisons: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in ("ssim", "psnr", "vif", "mse"):
            values = np.asarray(
                [getattr(row, name) for row in self.per_item if math.isfinite(getattr(row, name))]
            )
            if values.size:
                out[name] = {"mean": float(values.mean()), "std": float(values.std())}
            else:
                out[name] = {"mean": math.nan, "std": math.nan}
        return out

    def add_comparison(self, metric: str, method_a: str, method_b: str, w: float, p: float, direction: str):
        self.comparisons.append(
            {
                "metric": metric,
                "method_a": method_a,
                "method_b": method_b,
                "W": w,
                "p_value": p,
                "direction": direction,
            }
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "ssim", "psnr_db", "psnr_capped", "vif", "mse"])
            for row in self.per_item:
                capped = not math.isfinite(row.psnr)
                psnr_out = PSNR_CSV_CAP_DB if capped else row.psnr
                writer.writerow(
                    [row.item_id, f"{row.ssim:.6f}", f"{psnr_out:.4f}", int(capped), f"{row.vif:.6f}", f"{row.mse:.8e}"]
                )

    def to_json(self, path: str | Path) -> None:
        payload = {"aggregate": self.aggregate(), "comparisons": self.comparisons, "extras": self.extras}
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def _extract_slices(data: np.ndarray, plane: str) -> list[np.ndarray]:
    if plane == "axial":
        return [data[i] for i in range(data.shape[0])]
    if plane == "coronal":
        return [data[:, i, :] for i in range(data.shape[1])]
    if plane == "sagittal":
        return [data[:, :, i] for i in range(data.shape[2])]
    raise ValueError(f"plane must be axial, coronal, or sagittal, got {plane!r}")


def evaluate_volume(
    reference,
    candidate,
    plane: str = "axial",
    indices=None,
    id_prefix: str = "",
) -> list[SliceMetrics]:
    """Compute per-slice metrics between two same-shape volumes.

    Slices are extracted along `plane`; `indices` restricts evaluation to a
    subset (e.g. only the synthesized z positions of an upsampled volume).
    """
    ref, cand = reference.data, candidate.data
    if ref.shape != cand.shape:
        raise ValueError(f"volume shape mismatch: {ref.shape} vs {cand.shape}")
    ref_slices = _extract_slices(ref, plane)
    cand_slices = _extract_slices(cand, plane)
    if indices is None:
        indices = range(len(ref_slices))
    rows = []
    for i in indices:
        a, b = np.asarray(ref_slices[i], dtype=np.float64), np.asarray(cand_slices[i], dtype=np.float64)
        rows.append(
            SliceMetrics(
                item_id=f"{id_prefix}{plane}:{i}",
                ssim=ssim(a, b),
                psnr=psnr(a, b),
                vif=vif_p(a, b),
                mse=float(np.mean((a - b) ** 2)),
            )
        )
    return rows
