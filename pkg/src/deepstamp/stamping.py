"""Alpha compositing of watermarks onto image batches.

The blend used everywhere is standard alpha compositing scaled by a global
blend factor ``beta``::

    out = (1 - beta * alpha) * x + beta * alpha * rgb

Baseline schemes (static, opacity, displacement) draw their per-image
randomness from a stream keyed by ``(seed, image_index)`` so results do not
depend on batching or call order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .dataio import ImageBatch, Watermark, encode_cifar
from .errors import DimensionError, SpecError

Scheme = Literal["static", "opacity", "displacement", "learned"]
SCHEMES = ("static", "opacity", "displacement", "learned")

DEFAULT_OPACITY_SPAN = (0.3, 1.0)
DEFAULT_DISPLACEMENT = (4, 4)


@dataclass(frozen=True)
class StampSpec:
    blend_factor: float = 0.5
    scheme: Scheme = "static"
    # None means "DEFAULT_OPACITY_SPAN scaled by blend_factor"
    opacity_range: tuple[float, float] | None = None
    displacement_range: tuple[int, int] = DEFAULT_DISPLACEMENT
    pad_mode: Literal["zero-alpha"] = "zero-alpha"
    rng_seed: int = 0

    def resolved_opacity(self) -> tuple[float, float]:
        if self.opacity_range is None:
            lo, hi = DEFAULT_OPACITY_SPAN
            return (lo * self.blend_factor, hi * self.blend_factor)
        return tuple(self.opacity_range)

    def validate(self, hw: tuple[int, int] | None = None) -> None:
        if not 0.0 <= self.blend_factor <= 1.0:
            raise SpecError(f"blend factor {self.blend_factor} outside [0, 1]")
        if self.scheme not in SCHEMES:
            raise SpecError(f"unknown scheme {self.scheme!r}")
        lo, hi = self.resolved_opacity()
        if lo > hi:
            raise SpecError(f"opacity range lo={lo} > hi={hi}")
        if not (0.0 <= lo and hi <= 1.0):
            raise SpecError(f"opacity range ({lo}, {hi}) outside [0, 1]")
        dx, dy = self.displacement_range
        if dx < 0 or dy < 0:
            raise SpecError(f"negative displacement range {self.displacement_range}")
        if hw is not None and (dy >= hw[0] or dx >= hw[1]):
            raise SpecError(
                f"displacement range {self.displacement_range} must be below image size {hw}"
            )
        if self.pad_mode != "zero-alpha":
            raise SpecError(f"unsupported pad mode {self.pad_mode!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["opacity_range"] = list(self.resolved_opacity())
        d["displacement_range"] = list(self.displacement_range)
        return d


def blend(x, rgb, alpha, beta):
    """Composite; works on numpy arrays and torch tensors alike (no clamping)."""
    a = beta * alpha
    return (1 - a) * x + a * rgb


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _check_dims(x: ImageBatch, hw: tuple[int, int]) -> None:
    if x.hw != tuple(hw):
        raise DimensionError(f"watermark is {hw[0]}x{hw[1]}, images are {x.hw[0]}x{x.hw[1]}")


def _composite(x: ImageBatch, rgb: np.ndarray, alpha: np.ndarray, beta) -> ImageBatch:
    out = blend(x.data, rgb, alpha, beta)
    return x.with_data(np.clip(out, 0.0, 1.0, out=out))


def stamp(x: ImageBatch, w: Watermark, beta: float) -> ImageBatch:
    if not 0.0 <= beta <= 1.0:
        raise SpecError(f"blend factor {beta} outside [0, 1]")
    _check_dims(x, w.hw)
    return _composite(x, w.rgb, w.alpha, np.float32(beta))


def stamp_static(x: ImageBatch, w: Watermark, spec: StampSpec) -> ImageBatch:
    spec.validate(x.hw)
    return stamp(x, w, spec.blend_factor)


def draw_opacities(spec: StampSpec, n: int, start: int = 0) -> np.ndarray:
    lo, hi = spec.resolved_opacity()
    return np.array(
        [image_rng(spec.rng_seed, start + i).uniform(lo, hi) for i in range(n)], dtype=np.float32
    )


def stamp_opacity(
    x: ImageBatch, w: Watermark, spec: StampSpec, start: int = 0
) -> tuple[ImageBatch, np.ndarray]:
    """Static watermark with a per-image opacity drawn uniformly from the range.

    ``start`` offsets the per-image stream ids when stamping a dataset in chunks.
    """
    spec.validate(x.hw)
    _check_dims(x, w.hw)
    betas = draw_opacities(spec, len(x), start)
    return _composite(x, w.rgb, w.alpha, betas[:, None, None, None]), betas


def shift_planes(planes: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate [C, H, W] planes by (dx, dy); exposed pixels become 0."""
    out = np.zeros_like(planes)
    h, w = planes.shape[-2:]
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = planes[..., src_y, src_x]
    return out


def draw_offsets(spec: StampSpec, n: int, start: int = 0) -> np.ndarray:
    dx_max, dy_max = spec.displacement_range
    offsets = np.empty((n, 2), dtype=np.int64)
    for i in range(n):
        rng = image_rng(spec.rng_seed, start + i)
        offsets[i] = rng.integers(-dx_max, dx_max, endpoint=True), rng.integers(
            -dy_max, dy_max, endpoint=True
        )
    return offsets


def stamp_displaced(
    x: ImageBatch, w: Watermark, spec: StampSpec, start: int = 0
) -> tuple[ImageBatch, np.ndarray]:
    """Per-image random translation of the watermark; returns offsets [N, 2] as (dx, dy)."""
    spec.validate(x.hw)
    _check_dims(x, w.hw)
    offsets = draw_offsets(spec, len(x), start)
    planes = w.rgba()
    shifted = np.stack([shift_planes(planes, int(dx), int(dy)) for dx, dy in offsets])
    out = _composite(x, shifted[:, :3], shifted[:, 3:], np.float32(spec.blend_factor))
    return out, offsets


def as_planes(w_batch: Sequence[Watermark] | np.ndarray) -> np.ndarray:
    if isinstance(w_batch, np.ndarray):
        if w_batch.ndim != 4 or w_batch.shape[1] != 4:
            raise DimensionError(f"watermark batch must be [N, 4, H, W], got {list(w_batch.shape)}")
        return w_batch.astype(np.float32, copy=False)
    return np.stack([w.rgba() for w in w_batch])


def stamp_learned(
    x: ImageBatch, w_batch: Sequence[Watermark] | np.ndarray, beta: float
) -> ImageBatch:
    """Composite image i with its own synthesised watermark i."""
    if not 0.0 <= beta <= 1.0:
        raise SpecError(f"blend factor {beta} outside [0, 1]")
    planes = as_planes(w_batch)
    if len(planes) != len(x):
        raise DimensionError(f"{len(planes)} watermarks for {len(x)} images")
    _check_dims(x, planes.shape[2:])
    return _composite(x, planes[:, :3], planes[:, 3:], np.float32(beta))


def apply_scheme(
    x: ImageBatch, w: Watermark, spec: StampSpec, start: int = 0
) -> tuple[ImageBatch, dict]:
    """Dispatch a baseline scheme; returns the batch and the per-image draws."""
    if spec.scheme == "static":
        return stamp_static(x, w, spec), {}
    if spec.scheme == "opacity":
        out, betas = stamp_opacity(x, w, spec, start)
        return out, {"opacities": betas.tolist()}
    if spec.scheme == "displacement":
        out, offsets = stamp_displaced(x, w, spec, start)
        return out, {"offsets": offsets.tolist()}
    raise SpecError("the learned scheme needs a trained stamper; use training.synthesize")


def save_stamped(batch: ImageBatch, path, sidecar: dict) -> None:
    """Write a stamped split as a CIFAR binary plus a JSON sidecar next to it."""
    path = Path(path)
    path.write_bytes(encode_cifar(batch))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
