"""Reproducible desk-scale experiment drivers.

Three experiment kinds, each fully determined by a spec plus seed:

* ``rotation``        -- digit rotation study: train with (+15, 0, -15) degree
                         neighbor triplets, then interpolate between a digit
                         and its 40-degree rotation and score the synthesized
                         10/20/30-degree images by pixel MSE.
* ``synthetic-volume``-- degrade synthetic volumes (blur + K-subsampling),
                         upsample with the trained model and with the cubic
                         B-spline baseline, and compare per-slice metrics with
                         one-sided Wilcoxon tests.
* ``lambda-sweep``    -- train one model per synthesis-weight value and report
                         the reconstruction-vs-synthesis trade-off.

Every driver writes `metrics.csv`, `tests.json`, `history.csv`, `grids/`,
and model checkpoints under its output directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy.ndimage import gaussian_filter, rotate as ndimage_rotate

from .baseline import bspline_upsample_z
from .digits import digit_corpus
from .interp import AlphaSet, alpha_set, synthesize_between, upsample_volume
from .metrics import MetricReport, evaluate_volume, wilcoxon_one_sided
from .model import ModelConfig, ModelParams, reconstruct, save_checkpoint
from .autodiff import Tensor
from .training import SliceTriplet, TrainConfig, VolumeTripletSource, train, write_history_csv
from .volume import Volume, gaussian_blur_z, subsample_z

__all__ = [
    "ExperimentSpec",
    "load_spec",
    "rotation_spec",
    "synthetic_volume_spec",
    "lambda_sweep_spec",
    "rotate_image",
    "RotationTripletSource",
    "synthetic_volume_dataset",
    "degradation_protocol",
    "mnist_rotation_experiment",
    "compare_methods",
    "lambda_sweep",
    "run_experiment",
]

EVAL_ALPHAS = AlphaSet((0.25, 0.5, 0.75), 4)
EVAL_ANGLES = (10.0, 20.0, 30.0)
NEIGHBOR_ANGLE = 15.0
ENDPOINT_ANGLE = 40.0


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one experiment from a seed."""

    kind: str
    out_dir: str
    seed: int = 7
    train: TrainConfig = field(default_factory=TrainConfig)
    k_factors: tuple[int, ...] = (2,)
    lambdas: tuple[float, ...] = (0.0, 0.001, 0.01, 0.05, 0.1, 1.0)
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("rotation", "synthetic-volume", "lambda-sweep"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")


def rotation_spec(out_dir: str, seed: int = 7, epochs: int = 12, synthesis_weight: float = 10.0) -> ExperimentSpec:
    """Desk-scale digit-rotation experiment defaults."""
    cfg = TrainConfig(
        lr=4e-4,
        synthesis_weight=synthesis_weight,
        pairs_per_batch=32,
        patch_size=28,
        epochs=epochs,
        seed=seed,
        model=ModelConfig(latent_channels=16),
    )
    return ExperimentSpec(
        kind="rotation",
        out_dir=out_dir,
        seed=seed,
        train=cfg,
        dataset={"n_train": 2000, "n_val": 200, "n_test": 500, "n_eval": 200},
    )


def synthetic_volume_spec(
    out_dir: str,
    seed: int = 7,
    epochs: int = 10,
    lambdas: tuple[float, ...] = (0.05, 0.0),
) -> ExperimentSpec:
    """Desk-scale synthetic-volume comparison defaults."""
    cfg = TrainConfig(
        lr=4e-4,
        synthesis_weight=lambdas[0],
        pairs_per_batch=8,
        patch_size=64,
        epochs=epochs,
        seed=seed,
        model=ModelConfig(),
    )
    return ExperimentSpec(
        kind="synthetic-volume",
        out_dir=out_dir,
        seed=seed,
        train=cfg,
        k_factors=(2,),
        lambdas=lambdas,
        dataset={"n_train": 40, "n_val": 5, "n_test": 8, "slices": 24, "size": 64},
    )


def lambda_sweep_spec(out_dir: str, seed: int = 7, epochs: int = 10) -> ExperimentSpec:
    spec = synthetic_volume_spec(out_dir, seed=seed, epochs=epochs)
    return replace(spec, kind="lambda-sweep", lambdas=(0.0, 0.001, 0.01, 0.05, 0.1, 1.0))


def load_spec(path: str | Path) -> ExperimentSpec:
    """Read an experiment spec from a YAML mapping (schema in the README)."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ValueError(f"{path}: experiment spec must be a mapping with a 'kind' key")
    train_raw = dict(raw.get("train", {}))
    model_raw = dict(raw.get("model", {}))
    cfg = TrainConfig(**train_raw, model=ModelConfig(**model_raw)) if model_raw else TrainConfig(**train_raw)
    return ExperimentSpec(
        kind=str(raw["kind"]),
        out_dir=str(raw.get("out_dir", "out")),
        seed=int(raw.get("seed", 7)),
        train=cfg,
        k_factors=tuple(raw.get("k_factors", (2,))),
        lambdas=tuple(raw.get("lambdas", (0.0, 0.001, 0.01, 0.05, 0.1, 1.0))),
        dataset=dict(raw.get("dataset", {})),
    )


def _echo_spec(spec: ExperimentSpec, out: Path) -> None:
    payload = asdict(spec)
    payload["train"]["model"] = asdict(spec.train.model)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec-echo.yaml").write_text(yaml.safe_dump(payload), encoding="utf-8")


# ---------------------------------------------------------------------------
# rotation experiment


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the patch center with bilinear resampling and zero fill."""
    if degrees == 0.0:
        return np.asarray(image, dtype=np.float32)
    out = ndimage_rotate(
        np.asarray(image, dtype=np.float32),
        degrees,
        reshape=False,
        order=1,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _fit_patch(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = image.shape
    if h == patch_size and w == patch_size:
        return image
    if h >= patch_size and w >= patch_size:
        y0 = (h - patch_size) // 2
        x0 = (w - patch_size) // 2
        return image[y0 : y0 + patch_size, x0 : x0 + patch_size]
    py, px = max(patch_size - h, 0), max(patch_size - w, 0)
    padded = np.pad(image, ((py // 2, py - py // 2), (px // 2, px - px // 2)))
    return _fit_patch(padded, patch_size)


class RotationTripletSource:
    """Triplets (rot +15, base, rot -15) built from single digit images.

    Training draws a random base rotation per sample (full-circle
    augmentation); validation uses the unrotated images deterministically.
    """

    def __init__(self, images: np.ndarray, random_base_rotation: bool = True, max_validation: int = 128):
        if len(images) == 0:
            raise ValueError("empty image set")
        self.images = np.asarray(images, dtype=np.float32)
        self.random_base_rotation = random_base_rotation
        self.max_validation = max_validation

    @property
    def epoch_triplets(self) -> int:
        return len(self.images)

    def _triplet(self, image: np.ndarray, base: float, patch_size: int) -> SliceTriplet:
        return SliceTriplet(
            x_prev=_fit_patch(rotate_image(image, base + NEIGHBOR_ANGLE), patch_size),
            x_mid=_fit_patch(rotate_image(image, base), patch_size),
            x_next=_fit_patch(rotate_image(image, base - NEIGHBOR_ANGLE), patch_size),
        )

    def sample_batch(self, T: int, patch_size: int, rng: np.random.Generator) -> list[SliceTriplet]:
        idx = rng.integers(0, len(self.images), size=T)
        out = []
        for i in idx:
            base = float(rng.uniform(0.0, 360.0)) if self.random_base_rotation else 0.0
            out.append(self._triplet(self.images[i], base, patch_size))
        return out

    def validation_triplets(self, patch_size: int) -> list[SliceTriplet]:
        return [self._triplet(img, 0.0, patch_size) for img in self.images[: self.max_validation]]


def mnist_rotation_experiment(spec: ExperimentSpec) -> dict:
    """Digit rotation study; returns the report dict written to tests.json.

    The success criterion is this artifact's quantitative proxy for an
    otherwise qualitative comparison: for each held-out digit, the image
    synthesized at mixing coefficient 0.5 must be closer (pixel MSE) to the
    true 20-degree rotation than the unrotated endpoint is.
    """
    out = Path(spec.out_dir)
    _echo_spec(spec, out)
    ds = {"n_train": 2000, "n_val": 200, "n_test": 500, "n_eval": 200, "source_dir": None}
    ds.update(spec.dataset)
    train_imgs, val_imgs, test_imgs, source = digit_corpus(
        ds["n_train"], ds["n_val"], ds["n_test"], spec.seed, ds.get("source_dir")
    )

    mp, history = train(
        spec.train,
        RotationTripletSource(train_imgs),
        RotationTripletSource(val_imgs, random_base_rotation=False),
        out_dir=out,
    )

    n_eval = min(int(ds["n_eval"]), len(test_imgs))
    patch = spec.train.patch_size
    rows = []
    successes = 0
    for i in range(n_eval):
        base = _fit_patch(test_imgs[i], patch)
        endpoint = _fit_patch(rotate_image(test_imgs[i], ENDPOINT_ANGLE), patch)
        targets = [_fit_patch(rotate_image(test_imgs[i], a), patch) for a in EVAL_ANGLES]
        synths = synthesize_between(mp, base, endpoint, EVAL_ALPHAS)
        row = {"digit": i}
        for alpha, angle, target, synth in zip(EVAL_ALPHAS, EVAL_ANGLES, targets, synths):
            row[f"mse_synth_a{alpha}"] = float(np.mean((synth - target) ** 2))
            row[f"mse_start_vs_{int(angle)}"] = float(np.mean((base - target) ** 2))
            row[f"mse_end_vs_{int(angle)}"] = float(np.mean((endpoint - target) ** 2))
        if row["mse_synth_a0.5"] < row["mse_start_vs_20"]:
            successes += 1
        rows.append(row)

    _write_dict_rows(rows, out / "metrics.csv")
    _rotation_grid(mp, test_imgs[: min(8, len(test_imgs))], patch, out / "grids" / "rotation.png")

    report = {
        "experiment": "rotation",
        "digit_source": source,
        "n_eval": n_eval,
        "success_rate": successes / n_eval,
        "criterion": "mse(synth@0.5, rot20) < mse(rot0, rot20)",
        "final_train_recon": history[-1]["recon_loss"],
        "final_val_loss": history[-1]["val_loss"],
    }
    (out / "tests.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def _rotation_grid(mp: ModelParams, images: np.ndarray, patch: int, path: Path) -> None:
    rows = []
    for img in images:
        base = _fit_patch(img, patch)
        endpoint = _fit_patch(rotate_image(img, ENDPOINT_ANGLE), patch)
        synths = synthesize_between(mp, base, endpoint, EVAL_ALPHAS)
        truths = [_fit_patch(rotate_image(img, a), patch) for a in EVAL_ANGLES]
        rows.append([base, *truths, endpoint])
        rows.append([base, *synths, endpoint])
    save_image_grid(rows, path)


# ---------------------------------------------------------------------------
# synthetic volumes and the degradation protocol


def synthetic_volume_dataset(n_volumes: int, slices: int, size: int, seed: int) -> list[Volume]:
    """Volumes of drifting, slowly deforming soft-edged blobs plus texture.

    Adjacent slices differ smoothly (blob centers drift ~0-3 px per slice),
    which is the one property the interpolation method exploits. Values lie
    in [0, 1]; deterministic per (seed, index).
    """
    return [_one_synthetic_volume(np.random.default_rng([seed, i]), slices, size) for i in range(n_volumes)]


def _one_synthetic_volume(rng: np.random.Generator, n_slices: int, size: int) -> Volume:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    vol = np.zeros((n_slices, size, size))
    for _ in range(int(rng.integers(2, 5))):
        amp = rng.uniform(0.35, 0.85)
        cy0, cx0 = rng.uniform(0.3 * size, 0.7 * size, size=2)
        vy, vx = rng.uniform(-1.8, 1.8, size=2)
        wob_amp = rng.uniform(0.0, 2.5, size=2)
        wob_freq = rng.uniform(0.5, 1.5, size=2)
        wob_phase = rng.uniform(0.0, 2 * np.pi, size=2)
        ry0, rx0 = rng.uniform(size / 9.0, size / 4.0, size=2)
        r_amp = rng.uniform(0.0, 0.25)
        r_freq = rng.uniform(0.5, 1.5)
        r_phase = rng.uniform(0.0, 2 * np.pi)
        softness = rng.uniform(1.2, 2.5)
        for z in range(n_slices):
            tau = z - (n_slices - 1) / 2.0
            cy = cy0 + vy * tau + wob_amp[0] * np.sin(2 * np.pi * wob_freq[0] * z / n_slices + wob_phase[0])
            cx = cx0 + vx * tau + wob_amp[1] * np.sin(2 * np.pi * wob_freq[1] * z / n_slices + wob_phase[1])
            mod = 1.0 + r_amp * np.sin(2 * np.pi * r_freq * z / n_slices + r_phase)
            q = ((yy - cy) / (ry0 * mod)) ** 2 + ((xx - cx) / (rx0 * mod)) ** 2
            vol[z] += amp * np.exp(-(q**softness))
    texture = gaussian_filter(rng.standard_normal(vol.shape), sigma=(1.2, 2.5, 2.5))
    texture *= 0.04 / max(texture.std(), 1e-12)
    vol = np.clip(0.05 + vol + texture, 0.0, 1.0)
    return Volume(vol.astype(np.float32), (1.0, 1.0, 1.0), "original")


def degradation_protocol(vol: Volume, K: int) -> tuple[Volume, Volume]:
    """Blur along z with FWHM = K * sz, keep every K-th slice.

    Returns (low_res, ground_truth); the ground truth is the input volume,
    retained for scoring.
    """
    blurred = gaussian_blur_z(vol, K * vol.spacing[0])
    return subsample_z(blurred, K), vol


# ---------------------------------------------------------------------------
# method comparison and the synthesis-weight sweep


def _resolve_volume_dataset(spec: ExperimentSpec):
    ds = {"n_train": 40, "n_val": 5, "n_test": 8, "slices": 24, "size": 64}
    ds.update(spec.dataset)
    total = ds["n_train"] + ds["n_val"] + ds["n_test"]
    volumes = synthetic_volume_dataset(total, ds["slices"], ds["size"], spec.seed)
    train_vols = volumes[: ds["n_train"]]
    val_vols = volumes[ds["n_train"] : ds["n_train"] + ds["n_val"]]
    test_vols = volumes[ds["n_train"] + ds["n_val"] :]
    return train_vols, val_vols, test_vols


def _train_lambda_model(spec: ExperimentSpec, lam: float, K: int, train_vols, val_vols, out: Path):
    low_train = [degradation_protocol(v, K)[0] for v in train_vols]
    low_val = [degradation_protocol(v, K)[0] for v in val_vols]
    cfg = replace(spec.train, synthesis_weight=lam)
    mp, history = train(cfg, VolumeTripletSource(low_train), VolumeTripletSource(low_val))
    tag = f"K{K}_lambda{lam:g}"
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(mp, ckpt_dir / f"{tag}.asck")
    for row in history:
        row["model"] = tag
    return mp, history


def _truncate_gt(gt: Volume, K: int) -> Volume:
    """Ground-truth slices reachable after subsample-then-upsample by K."""
    kept = (gt.num_slices - 1) // K * K + 1
    return Volume(gt.data[:kept].copy(), gt.spacing, gt.provenance)


def _reconstruction_volume(mp: ModelParams, low: Volume) -> Volume:
    recon = np.stack(
        [reconstruct(mp, Tensor(low.data[i][None, None]), mode="eval").data[0, 0] for i in range(low.num_slices)]
    )
    return Volume(recon, low.spacing, "reconstructed")


def compare_methods(spec: ExperimentSpec) -> MetricReport:
    """Degrade, upsample via trained models and the B-spline baseline, score.

    Produces paired per-slice rows (same slice id across methods) so the
    one-sided Wilcoxon tests pair cleanly, plus reconstruction-vs-synthesis
    aggregates per trained model. The first entry of `spec.lambdas` is the
    primary synthesis weight compared against the baseline.
    """
    out = Path(spec.out_dir)
    _echo_spec(spec, out)
    train_vols, val_vols, test_vols = _resolve_volume_dataset(spec)

    report = MetricReport()
    all_history: list[dict] = []
    summary: dict = {"methods": {}, "wilcoxon": []}

    for K in spec.k_factors:
        models: dict[str, ModelParams] = {}
        for lam in spec.lambdas:
            mp, history = _train_lambda_model(spec, lam, K, train_vols, val_vols, out)
            models[f"asi_lambda{lam:g}"] = mp
            all_history.extend(history)

        method_rows: dict[str, dict[str, list]] = {}
        for vol_idx, gt_full in enumerate(test_vols):
            low, _ = degradation_protocol(gt_full, K)
            gt = _truncate_gt(gt_full, K)
            synth_idx = [i for i in range(gt.num_slices) if i % K]

            candidates = {name: upsample_volume(mp, low, K) for name, mp in models.items()}
            candidates["bspline"] = bspline_upsample_z(low, K)

            for name, up in candidates.items():
                prefix = f"{name}|K{K}|vol{vol_idx}|"
                rows = evaluate_volume(gt, up, "axial", indices=synth_idx, id_prefix=prefix + "syn|")
                rows += evaluate_volume(gt, up, "sagittal", id_prefix=prefix)
                report.per_item.extend(rows)
                bucket = method_rows.setdefault(name, {"syn_ssim": [], "syn_psnr": [], "syn_vif": [], "syn_mse": []})
                for r in rows:
                    if "|syn|" in r.item_id:
                        bucket["syn_ssim"].append(r.ssim)
                        bucket["syn_psnr"].append(r.psnr)
                        bucket["syn_vif"].append(r.vif)
                        bucket["syn_mse"].append(r.mse)

            for name, mp in models.items():
                rec_rows = evaluate_volume(
                    low, _reconstruction_volume(mp, low), "axial", id_prefix=f"{name}|K{K}|vol{vol_idx}|rec|"
                )
                report.per_item.extend(rec_rows)
                bucket = method_rows[name]
                bucket.setdefault("rec_ssim", []).extend(r.ssim for r in rec_rows)
                bucket.setdefault("rec_psnr", []).extend(r.psnr for r in rec_rows)

        for name, bucket in method_rows.items():
            summary["methods"][f"{name}|K{K}"] = {
                key: float(np.mean([v for v in values if math.isfinite(v)])) for key, values in bucket.items()
            }

        primary = f"asi_lambda{spec.lambdas[0]:g}"
        for metric in ("ssim", "psnr", "vif"):
            a = np.asarray(method_rows[primary][f"syn_{metric}"])
            b = np.asarray(method_rows["bspline"][f"syn_{metric}"])
            finite = np.isfinite(a) & np.isfinite(b)
            diffs = a[finite] - b[finite]
            if np.any(diffs != 0):
                w, p = wilcoxon_one_sided(diffs, alternative="greater")
                report.add_comparison(metric, primary, "bspline", w, p, "greater")
                summary["wilcoxon"].append({"metric": metric, "W": w, "p": p, "K": K})

    report.extras = summary
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "tests.json")
    write_history_csv_with_model(all_history, out / "history.csv")
    _comparison_grid(test_vols, spec, out / "grids" / "sagittal.png")
    return report


def lambda_sweep(spec: ExperimentSpec) -> MetricReport:
    """Train one model per synthesis weight; report the rec/syn trade-off.

    Reuses the comparison machinery with the baseline included, evaluating
    reconstruction on kept slices and synthesis on excluded slices for each
    weight in `spec.lambdas`.
    """
    return compare_methods(spec)


def write_history_csv_with_model(history: list[dict], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "epoch", "recon_loss", "synth_loss", "val_loss"])
        writer.writeheader()
        writer.writerows(history)


def _comparison_grid(test_vols, spec: ExperimentSpec, path: Path) -> None:
    if not test_vols:
        return
    gt = _truncate_gt(test_vols[0], spec.k_factors[0])
    low, _ = degradation_protocol(test_vols[0], spec.k_factors[0])
    up = bspline_upsample_z(low, spec.k_factors[0])
    mid_x = gt.shape[2] // 2
    save_image_grid([[gt.data[:, :, mid_x], up.data[:, :, mid_x]]], path)


# ---------------------------------------------------------------------------
# dispatch and grid rendering


def run_experiment(spec: ExperimentSpec) -> dict:
    if spec.kind == "rotation":
        return mnist_rotation_experiment(spec)
    if spec.kind == "synthetic-volume":
        report = compare_methods(spec)
        return report.extras
    report = lambda_sweep(spec)
    return report.extras


def save_image_grid(rows: list[list[np.ndarray]], path: str | Path, separator: int = 2) -> None:
    """Tile 2-D arrays (values in [0, 1]) into one grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cell_h = max(img.shape[0] for row in rows for img in row)
    cell_w = max(img.shape[1] for row in rows for img in row)
    n_cols = max(len(row) for row in rows)
    grid = np.zeros(
        (len(rows) * (cell_h + separator) - separator, n_cols * (cell_w + separator) - separator),
        dtype=np.uint8,
    )
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            arr = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
            y0 = r * (cell_h + separator)
            x0 = c * (cell_w + separator)
            grid[y0 : y0 + arr.shape[0], x0 : x0 + arr.shape[1]] = arr
    Image.fromarray(grid, mode="L").save(path)


def _write_dict_rows(rows: list[dict], path: Path) -> None:
    import csv

    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
