"""Procedural stand-in for CIFAR-10 when the real binaries are not available.

Ten classes, each a shape family drawn at a random position, size and colour
over a smooth cluttered background with pixel noise and a faint distractor.
Objects land anywhere in the frame, including under a centred watermark, so
occluding part of the image costs accuracy the way it does on natural images.
Output uses the CIFAR-10 record layout, so everything downstream is
unchanged.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .dataio import ImageBatch, save_cifar_batch

SIZE = 32
CLASS_HUES = np.linspace(0.0, 1.0, 10, endpoint=False)


def _shape_mask(kind: int, yy, xx, cy, cx, r, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    dist = np.hypot(u, v)
    if kind == 0:  # disk
        return dist <= r
    if kind == 1:  # square
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == 2:  # triangle
        return (v <= r * 0.6) & (v >= 1.7 * np.abs(u) - r)
    if kind == 3:  # ring
        return (dist <= r) & (dist >= r * 0.55)
    if kind == 4:  # cross
        return ((np.abs(u) <= r * 0.3) | (np.abs(v) <= r * 0.3)) & (np.maximum(np.abs(u), np.abs(v)) <= r)
    if kind == 5:  # stripes
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.mod(v + r, r * 0.7) < r * 0.35)
    if kind == 6:  # bar
        return (np.abs(u) <= r * 1.2) & (np.abs(v) <= r * 0.3)
    if kind == 7:  # checker
        cell = np.floor((u + r) / (r * 0.66)) + np.floor((v + r) / (r * 0.66))
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.mod(cell, 2) == 0)
    if kind == 8:  # two dots
        return (np.hypot(u - r * 0.6, v) <= r * 0.42) | (np.hypot(u + r * 0.6, v) <= r * 0.42)
    # kind 9: L shape
    return ((np.abs(u + r * 0.6) <= r * 0.3) & (np.abs(v) <= r)) | (
        (np.abs(v - r * 0.7) <= r * 0.3) & (np.abs(u) <= r)
    )


def _hsv_to_rgb(h, s, v) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def make_images(
    n: int,
    seed: int,
    noise: float = 0.06,
    hue_jitter: float = 0.03,
    radius: tuple[float, float] = (7.0, 11.0),
    background: tuple[float, float] = (0.25, 0.75),
) -> ImageBatch:
    """``n`` images [n, 3, 32, 32] with balanced labels in a seeded random order."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    data = np.empty((n, 3, SIZE, SIZE), dtype=np.float64)
    for i, label in enumerate(labels):
        # smooth background: bilinear upsampling of a 4x4 random colour grid
        img = zoom(rng.uniform(*background, size=(3, 4, 4)), (1, SIZE / 4, SIZE / 4), order=1)
        # faint distractor from a random class
        d_kind = int(rng.integers(10))
        d_mask = _shape_mask(
            d_kind, yy, xx, rng.uniform(4, 28), rng.uniform(4, 28), rng.uniform(3, 5), rng.uniform(0, np.pi)
        )
        img = np.where(d_mask, 0.7 * img + 0.3 * rng.uniform(0, 1, (3, 1, 1)), img)
        # the labelled object
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(r * 0.6, SIZE - r * 0.6, size=2)
        mask = _shape_mask(int(label), yy, xx, cy, cx, r, rng.uniform(-0.5, 0.5))
        hue = (CLASS_HUES[label] + rng.normal(0, hue_jitter)) % 1.0
        colour = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))[:, None, None]
        img = np.where(mask, 0.15 * img + 0.85 * colour, img)
        img = img + rng.normal(0, noise, img.shape)
        data[i] = np.clip(img, 0.0, 1.0)
    # 8-bit like real CIFAR
    data = np.rint(data * 255.0) / 255.0
    return ImageBatch(data.astype(np.float32), labels)


def write_surrogate(out_dir, n_train: int = 50000, n_test: int = 10000, seed: int = 0) -> Path:
    """Write ``data_batch_{1..5}.bin`` and ``test_batch.bin`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_batch = -(-n_train // 5)
    for b in range(5):
        count = min(per_batch, n_train - b * per_batch)
        if count <= 0:
            break
        save_cifar_batch(make_images(count, seed * 1000 + b + 1), out / f"data_batch_{b + 1}.bin")
    save_cifar_batch(make_images(n_test, seed * 1000 + 999), out / "test_batch.bin")
    return out
