"""Digit image corpus for the rotation-interpolation experiment.

Two sources, tried in order:

1. Standard IDX files (``train-images-idx3-ubyte`` etc., optionally gzipped)
   from an explicit directory or ``$ASI_DIGITS_DIR`` -- this is how the real
   handwritten-digit set plugs in.
2. A deterministic, procedurally rendered glyph corpus (scalable bundled font
   plus seeded affine jitter) so the experiment runs with no external data.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy.ndimage import gaussian_filter

__all__ = ["load_idx_images", "render_glyph_corpus", "digit_corpus"]

IMAGE_SIZE = 28

_TRAIN_IMAGE_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path: str | Path) -> np.ndarray:
    """Parse an IDX image file into float32 images scaled to [0, 1]."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        magic, count = struct.unpack(">II", fh.read(8))
        if magic != 2051:
            raise ValueError(f"{path}: not an IDX image file (magic {magic})")
        rows, cols = struct.unpack(">II", fh.read(8))
        raw = fh.read(count * rows * cols)
    if len(raw) != count * rows * cols:
        raise ValueError(f"{path}: truncated IDX payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    return images.astype(np.float32) / 255.0


def _find_idx_file(directory: Path) -> Path | None:
    for stem in _TRAIN_IMAGE_NAMES:
        for name in (stem, stem + ".gz"):
            candidate = directory / name
            if candidate.is_file():
                return candidate
    return None


def _render_one(digit: int, rng: np.random.Generator) -> np.ndarray:
    size = IMAGE_SIZE
    font = ImageFont.load_default(size=float(rng.uniform(17.0, 23.0)))
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx = size / 2 + float(rng.uniform(-1.5, 1.5))
    cy = size / 2 + float(rng.uniform(-1.5, 1.5))
    draw.text((cx, cy), str(digit), fill=255, font=font, anchor="mm")

    # mild random shear/scale about the image center
    shear = float(rng.uniform(-0.18, 0.18))
    sx = float(rng.uniform(0.9, 1.1))
    sy = float(rng.uniform(0.9, 1.1))
    c = (size - 1) / 2.0
    a, b_, d, e = 1.0 / sx, -shear, 0.0, 1.0 / sy
    canvas = canvas.transform(
        (size, size),
        Image.Transform.AFFINE,
        (a, b_, c - a * c - b_ * c, d, e, c - d * c - e * c),
        resample=Image.Resampling.BILINEAR,
    )
    img = np.asarray(canvas, dtype=np.float32) / 255.0
    img = gaussian_filter(img, sigma=float(rng.uniform(0.4, 0.7)))
    peak = img.max()
    if peak > 0:
        img = img / peak
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_glyph_corpus(count: int, seed: int) -> np.ndarray:
    """Deterministic digit-glyph images, (count, 28, 28) float32 in [0, 1]."""
    rng = np.random.default_rng(seed)
    digits = rng.integers(0, 10, size=count)
    return np.stack([_render_one(int(d), rng) for d in digits])


def digit_corpus(
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    source_dir: str | Path | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, str]:
    """Return (train, val, test, source_tag) digit images.

    IDX data is used when available (shuffled deterministically by `seed`),
    otherwise the glyph corpus. Raises if an IDX source is too small for the
    requested split.
    """
    directory = Path(source_dir) if source_dir else None
    if directory is None and os.environ.get("ASI_DIGITS_DIR"):
        directory = Path(os.environ["ASI_DIGITS_DIR"])

    if directory is not None and directory.is_dir():
        idx = _find_idx_file(directory)
        if idx is not None:
            images = load_idx_images(idx)
            needed = n_train + n_val + n_test
            if len(images) < needed:
                raise ValueError(f"{idx} holds {len(images)} images; split needs {needed}")
            order = np.random.default_rng(seed).permutation(len(images))[:needed]
            chosen = images[order]
            train = chosen[:n_train]
            val = chosen[n_train : n_train + n_val]
            test = chosen[n_train + n_val :]
            return train, val, test, f"idx:{idx.name}"

    images = render_glyph_corpus(n_train + n_val + n_test, seed)
    return (
        images[:n_train],
        images[n_train : n_train + n_val],
        images[n_train + n_val :],
        "glyphs",
    )
