"""How hard a stamped dataset is to clean up.

Two measurements:

* :func:`randomness` - how much the embedded watermark varies between images.
* :func:`mean_estimate_attack` - a removal probe that assumes every image
  carries the *same* watermark, estimates it from the whole batch, inverts
  the blend and reports how far the recovered images are from the truth.

The probe is exact for a static watermark, so any residual it leaves on a
stamped set measures the per-image variation it could not model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataio import ImageBatch, Watermark
from .errors import DimensionError, InsufficientSamples
from .stamping import as_planes

MIN_ATTACK_SAMPLES = 8
# denominators below this are treated as fully opaque
MIN_TRANSMISSION = 1.0 / 255.0

ATTACK_NOTES = (
    "mean-estimation probe; attacker knows beta; matte estimated by per-pixel "
    "regression on clean references when given, otherwise from the normalised "
    "magnitude of the batch mean's deviation from the batch median"
)


@dataclass
class RandomnessReport:
    mean_pairwise_l2: float
    per_pixel_variance: float
    n_samples: int

    def to_json(self) -> dict:
        return asdict(self)


def randomness(w_batch, max_pairs_n: int = 4096, seed: int = 0) -> RandomnessReport:
    """Spread of synthesised watermarks [N, 4, H, W].

    ``mean_pairwise_l2`` is the mean over pairs of ||w_i - w_j||_2 / sqrt(#elements);
    all pairs are used up to ``max_pairs_n`` watermarks, otherwise a seeded
    subsample of that size.
    """
    planes = as_planes(w_batch).reshape(len(w_batch), -1).astype(np.float64)
    n = len(planes)
    if n < 2:
        raise InsufficientSamples(f"randomness needs at least 2 watermarks, got {n}")
    # both statistics are translation invariant; shifting by the first sample
    # makes identical watermarks produce exact zeros
    planes = planes - planes[0]
    variance = float(planes.var(axis=0).mean())
    if n > max_pairs_n:
        pick = np.random.default_rng(seed).choice(n, max_pairs_n, replace=False)
        planes = planes[np.sort(pick)]
    # centring keeps the Gram-matrix identity clear of cancellation error
    planes = planes - planes.mean(axis=0)
    sq = (planes**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * planes @ planes.T
    iu = np.triu_indices(len(planes), k=1)
    dist = np.sqrt(np.clip(d2[iu], 0.0, None) / planes.shape[1])
    return RandomnessReport(float(dist.mean()), variance, n)


def _matte_from_regression(stamped: np.ndarray, clean: np.ndarray, beta: float) -> np.ndarray:
    """Per-pixel least squares for ``stamped - clean = -a * clean + c`` (a shared over channels)."""
    diff = stamped.astype(np.float64) - clean
    dc = diff - diff.mean(axis=0)
    xc = clean - clean.mean(axis=0)
    num = -(dc * xc).sum(axis=(0, 1))
    den = (xc**2).sum(axis=(0, 1))
    a = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-12)
    return np.clip(a / beta, 0.0, 1.0)[None]


def _matte_from_magnitude(stamped: np.ndarray, background: np.ndarray) -> np.ndarray:
    dev = stamped.mean(axis=0) - background
    mag = np.sqrt((dev**2).sum(axis=0))
    peak = mag.max()
    return (mag / peak if peak > 0 else mag)[None]


def mean_estimate_attack(
    stamped: ImageBatch, clean_ref: ImageBatch | None, beta: float
) -> tuple[Watermark, float | None]:
    """Estimate one shared watermark, strip it from every image.

    Returns the estimated watermark and the residual: mean over images of the
    RMS difference between recovered and true clean pixels (``None`` without
    ``clean_ref``).
    """
    n = len(stamped)
    if n < MIN_ATTACK_SAMPLES:
        raise InsufficientSamples(f"attack needs at least {MIN_ATTACK_SAMPLES} images, got {n}")
    s = stamped.data.astype(np.float64)
    if clean_ref is not None:
        if clean_ref.data.shape != stamped.data.shape:
            raise DimensionError(f"clean {clean_ref.data.shape} vs stamped {stamped.data.shape}")
        ref = clean_ref.data.astype(np.float64)
        alpha = _matte_from_regression(s, ref, beta) if beta > 0 else np.zeros((1,) + s.shape[2:])
    else:
        ref = np.median(s, axis=(0, 2, 3))[:, None, None] * np.ones(s.shape[1:])
        alpha = _matte_from_magnitude(s, ref)
    a = beta * alpha
    # common watermark term beta*alpha*rgb
    term = (s - (1.0 - a) * ref).mean(axis=0)
    rgb = np.divide(term, a, out=np.zeros_like(term), where=a > 1e-6)
    estimate = Watermark(np.clip(rgb, 0.0, 1.0), np.clip(alpha, 0.0, 1.0))
    if clean_ref is None:
        return estimate, None
    recovered = np.clip((s - term) / np.maximum(1.0 - a, MIN_TRANSMISSION), 0.0, 1.0)
    err = (recovered - clean_ref.data.astype(np.float64)).reshape(n, -1)
    residual = float(np.sqrt((err**2).mean(axis=1)).mean())
    return estimate, residual
