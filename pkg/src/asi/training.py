"""Combined reconstruction+synthesis training.

The loss on a batch of slice triplets (x_prev, x_mid, x_next) is

    L = mse(x_mid, reconstruct(x_mid))
        + weight * d(x_mid, decode(0.5 * encode(x_prev) + 0.5 * encode(x_next)))

where d is a pluggable image distance (pixel MSE, differentiable DSSIM, or a
user-supplied fixed convolutional feature stack). All three slices of a batch
share one encoder forward pass, so batch-norm statistics see the whole
minibatch. With weight 0 the synthesis branch is skipped entirely and the
gradients equal those of plain reconstruction training bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Parameter, Tensor
from .model import ModelConfig, ModelParams, build_model, decode, encode, save_checkpoint
from .metrics import gaussian_window
from .volume import Volume

__all__ = [
    "TrainConfig",
    "SliceTriplet",
    "AdamState",
    "VolumeTripletSource",
    "dssim_distance",
    "ExternalFeatureDistance",
    "synthesis_distance_fn",
    "combined_loss",
    "sample_triplets",
    "augment",
    "adam_step",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    `synthesis_weight` is the nonnegative weight of the synthesis term
    (0 disables it); per-dataset values used in the experiments: 0.05 for
    cardiac-style data, 0.001 for brain-style data, 10 for digit rotation.
    """

    lr: float = 1e-5
    synthesis_weight: float = 0.05
    pairs_per_batch: int = 12
    patch_size: int = 128
    epochs: int = 50
    seed: int = 0
    synthesis_distance: str = "dssim"  # mse | dssim | external-feature
    feature_stack_path: str | None = None
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 0  # additionally save every N epochs when > 0

    def __post_init__(self):
        if self.synthesis_weight < 0:
            raise ValueError("synthesis_weight must be nonnegative")
        if self.patch_size % 4:
            raise ValueError(f"patch_size must be divisible by 4, got {self.patch_size}")
        if self.synthesis_distance not in ("mse", "dssim", "external-feature"):
            raise ValueError(f"unknown synthesis distance {self.synthesis_distance!r}")


@dataclass(frozen=True)
class SliceTriplet:
    """Co-registered patches from three consecutive slices of one volume."""

    x_prev: np.ndarray
    x_mid: np.ndarray
    x_next: np.ndarray

    def __post_init__(self):
        if not (self.x_prev.shape == self.x_mid.shape == self.x_next.shape):
            raise ValueError("triplet patches must share one shape")


def _stack(batch: list[SliceTriplet]) -> np.ndarray:
    return np.stack([[t.x_prev, t.x_mid, t.x_next] for t in batch]).astype(np.float32)


# ---------------------------------------------------------------------------
# synthesis distances


_DSSIM_WINDOW = gaussian_window(11, 1.5)
_DSSIM_C1 = 0.01**2
_DSSIM_C2 = 0.03**2


def dssim_distance(a: Tensor, b: Tensor) -> Tensor:
    """Structural dissimilarity (1 - SSIM)/2 in [0, 1], differentiable.

    Same windowing as the evaluation metric: 11x11 Gaussian, sigma 1.5,
    valid positions, population moments.
    """
    mu_a = ad.window_corr(a, _DSSIM_WINDOW)
    mu_b = ad.window_corr(b, _DSSIM_WINDOW)
    var_a = ad.sub(ad.window_corr(ad.mul(a, a), _DSSIM_WINDOW), ad.mul(mu_a, mu_a))
    var_b = ad.sub(ad.window_corr(ad.mul(b, b), _DSSIM_WINDOW), ad.mul(mu_b, mu_b))
    cov = ad.sub(ad.window_corr(ad.mul(a, b), _DSSIM_WINDOW), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.shift(ad.scale(ad.mul(mu_a, mu_b), 2.0), _DSSIM_C1), ad.shift(ad.scale(cov, 2.0), _DSSIM_C2))
    den = ad.mul(
        ad.shift(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), _DSSIM_C1),
        ad.shift(ad.add(var_a, var_b), _DSSIM_C2),
    )
    mean_ssim = ad.mean_all(ad.div(num, den))
    return ad.scale(ad.shift(ad.scale(mean_ssim, -1.0), 1.0), 0.5)


class ExternalFeatureDistance:
    """Distance through a fixed convolutional feature stack.

    The stack is a checkpointed encoder (ASCK file); the distance is the sum
    of feature-map mean squared errors after each encoder stage. Weights stay
    frozen, so only the images receive gradients. This is the hook for
    converted pretrained feature extractors.
    """

    def __init__(self, checkpoint_path: str):
        from .model import load_checkpoint

        self.stack = load_checkpoint(checkpoint_path)
        for p in self.stack.parameters():
            p.tensor.requires_grad = False

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        fa = encode(self.stack, a, mode="eval")
        fb = encode(self.stack, b, mode="eval")
        return ad.mse(fa, fb)


def synthesis_distance_fn(config: TrainConfig):
    if config.synthesis_distance == "mse":
        return ad.mse
    if config.synthesis_distance == "dssim":
        return dssim_distance
    if config.feature_stack_path is None:
        raise ValueError("external-feature distance requires feature_stack_path")
    return ExternalFeatureDistance(config.feature_stack_path)


# ---------------------------------------------------------------------------
# loss


def combined_loss(
    mp: ModelParams,
    batch: np.ndarray,
    synthesis_weight: float,
    distance=dssim_distance,
    mode: str = "train",
) -> tuple[Tensor, dict[str, float]]:
    """Loss over a stacked triplet batch of shape (T, 3, H, W).

    Returns the scalar loss tensor and the component values for logging.
    When `synthesis_weight` is zero only the reconstruction branch enters the
    recorded graph; the synthesis component is still reported from a
    no-gradient eval-mode pass.
    """
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected batch shape (T, 3, H, W), got {batch.shape}")
    x_prev = batch[:, 0][:, None]
    x_mid = batch[:, 1][:, None]
    x_next = batch[:, 2][:, None]
    mid_t = Tensor(x_mid)

    if synthesis_weight == 0.0:
        recon = ad.mse(decode(mp, encode(mp, mid_t, mode), mode), mid_t)
        synth_value = _eval_synthesis(mp, x_prev, x_mid, x_next, distance)
        return recon, {"reconstruction": recon.item(), "synthesis": synth_value}

    # one fused encoder pass over [prev, mid, next]
    fused = Tensor(np.concatenate([x_prev, x_mid, x_next], axis=0).astype(np.float32))
    codes = encode(mp, fused, mode)
    t = batch.shape[0]
    z_prev = ad.scale(_slice_batch(codes, 0, t), 0.5)
    z_mid = _slice_batch(codes, t, 2 * t)
    z_next = ad.scale(_slice_batch(codes, 2 * t, 3 * t), 0.5)
    z_half = ad.add(z_prev, z_next)

    decoded = decode(mp, _concat_batch(z_mid, z_half), mode)
    recon = ad.mse(_slice_batch(decoded, 0, t), mid_t)
    synth = distance(mid_t, _slice_batch(decoded, t, 2 * t))
    loss = ad.add(recon, ad.scale(synth, synthesis_weight))
    return loss, {"reconstruction": recon.item(), "synthesis": synth.item()}


def _slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return ad._record(out, (x,), bwd)


def _concat_batch(a: Tensor, b: Tensor) -> Tensor:
    na = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def bwd(g):
        return g[:na].copy(), g[na:].copy()

    return ad._record(out, (a, b), bwd)


def _eval_synthesis(mp, x_prev, x_mid, x_next, distance) -> float:
    codes = encode(mp, Tensor(np.concatenate([x_prev, x_next], axis=0)), mode="eval")
    t = x_prev.shape[0]
    z_half = Tensor(0.5 * codes.data[:t] + 0.5 * codes.data[t:])
    synth = decode(mp, z_half, mode="eval")
    return distance(Tensor(x_mid), synth).item()


# ---------------------------------------------------------------------------
# batching and augmentation


def sample_triplets(dataset: list[Volume], T: int, patch_size: int, rng: np.random.Generator) -> list[SliceTriplet]:
    """Draw T random slice triplets with co-located in-plane patches.

    Volumes with fewer than 3 slices are skipped; middle-slice indices and
    patch origins are uniform over valid positions.
    """
    eligible = [v for v in dataset if v.num_slices >= 3]
    if not eligible:
        raise ValueError("no volume with at least 3 slices in the dataset")
    batch = []
    for _ in range(T):
        vol = eligible[rng.integers(len(eligible))]
        z, y, x = vol.shape
        if y < patch_size or x < patch_size:
            raise ValueError(f"patch size {patch_size} exceeds in-plane dims {(y, x)}")
        mid = int(rng.integers(1, z - 1))
        y0 = int(rng.integers(0, y - patch_size + 1))
        x0 = int(rng.integers(0, x - patch_size + 1))
        window = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        batch.append(
            SliceTriplet(
                x_prev=vol.data[mid - 1][window],
                x_mid=vol.data[mid][window],
                x_next=vol.data[mid + 1][window],
            )
        )
    return batch


def augment(batch: list[SliceTriplet], rng: np.random.Generator) -> list[SliceTriplet]:
    """Shared per-triplet 90-degree rotation and multiplicative intensity jitter.

    The rotation count is uniform over {0,1,2,3}; the intensity scale is
    uniform in [0.9, 1.1] with the result clamped back to [0, 1].
    """
    out = []
    for triplet in batch:
        k = int(rng.integers(0, 4))
        gain = float(rng.uniform(0.9, 1.1))
        imgs = []
        for img in (triplet.x_prev, triplet.x_mid, triplet.x_next):
            rotated = np.rot90(img, k) if k else img
            imgs.append(np.clip(rotated * gain, 0.0, 1.0).astype(np.float32))
        out.append(SliceTriplet(*imgs))
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: list[Parameter],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Standard Adam update with bias correction, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.tensor.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.tensor.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.tensor.data.dtype)


# ---------------------------------------------------------------------------
# triplet sources and the training loop


class VolumeTripletSource:
    """Slice triplets drawn from a list of volumes."""

    def __init__(self, volumes: list[Volume], max_validation_triplets: int = 256):
        self.volumes = [v for v in volumes if v.num_slices >= 3]
        if not self.volumes:
            raise ValueError("dataset has no volume with >= 3 slices")
        self.max_validation_triplets = max_validation_triplets

    @property
    def epoch_triplets(self) -> int:
        return sum(v.num_slices - 2 for v in self.volumes)

    def sample_batch(self, T: int, patch_size: int, rng: np.random.Generator) -> list[SliceTriplet]:
        return sample_triplets(self.volumes, T, patch_size, rng)

    def validation_triplets(self, patch_size: int) -> list[SliceTriplet]:
        out = []
        for vol in self.volumes:
            z, y, x = vol.shape
            y0 = (y - patch_size) // 2
            x0 = (x - patch_size) // 2
            window = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
            for mid in range(1, z - 1):
                out.append(
                    SliceTriplet(vol.data[mid - 1][window], vol.data[mid][window], vol.data[mid + 1][window])
                )
                if len(out) >= self.max_validation_triplets:
                    return out
        return out


def _validation_loss(mp, source, config, distance) -> float:
    triplets = source.validation_triplets(config.patch_size)
    if not triplets:
        raise ValueError("validation set produced no triplets")
    total = 0.0
    t = max(1, config.pairs_per_batch)
    for i in range(0, len(triplets), t):
        chunk = _stack(triplets[i : i + t])
        loss, _ = combined_loss(mp, chunk, config.synthesis_weight, distance, mode="eval")
        total += loss.item() * chunk.shape[0]
    return total / len(triplets)


def train(config: TrainConfig, train_set, val_set, out_dir: str | Path | None = None):
    """Run the optimization loop and return (best params, history).

    `train_set` / `val_set` provide triplets (`VolumeTripletSource` for
    volumes; the rotation source in the experiments module for digit images).
    The checkpoint with the lowest validation combined loss is returned;
    history rows carry per-epoch training components and validation loss.
    """
    if train_set.epoch_triplets == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    mp = build_model(config.model, seed=config.seed)
    distance = synthesis_distance_fn(config)
    opt = AdamState()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    steps_per_epoch = max(1, math.ceil(train_set.epoch_triplets / config.pairs_per_batch))
    history: list[dict] = []
    best: ModelParams | None = None
    best_val = math.inf

    for epoch in range(1, config.epochs + 1):
        recon_sum = 0.0
        synth_sum = 0.0
        for _ in range(steps_per_epoch):
            batch = train_set.sample_batch(config.pairs_per_batch, config.patch_size, rng)
            if config.augment:
                batch = augment(batch, rng)
            stacked = _stack(batch)
            ad.zero_grad(mp.parameters())
            with Graph() as graph:
                loss, parts = combined_loss(mp, stacked, config.synthesis_weight, distance, mode="train")
                ad.backward(loss, graph)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            adam_step(mp.parameters(), opt, config.lr)
            recon_sum += parts["reconstruction"]
            synth_sum += parts["synthesis"]

        val_loss = _validation_loss(mp, val_set, config, distance)
        row = {
            "epoch": epoch,
            "recon_loss": recon_sum / steps_per_epoch,
            "synth_loss": synth_sum / steps_per_epoch,
            "val_loss": val_loss,
        }
        history.append(row)
        if val_loss < best_val:
            best_val = val_loss
            best = mp.copy()
            if out_path is not None:
                save_checkpoint(best, out_path / "checkpoints" / "best.asck")
        if out_path is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(mp, out_path / "checkpoints" / f"epoch{epoch:04d}.asck")

    assert best is not None
    if out_path is not None:
        write_history_csv(history, out_path / "history.csv")
    return best, history


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "recon_loss", "synth_loss", "val_loss"])
        writer.writeheader()
        writer.writerows(history)
