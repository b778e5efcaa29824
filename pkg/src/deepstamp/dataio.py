"""File formats: CIFAR-10 binaries, watermark rasters, raw tensors and checkpoints.

Everything is float32 in [0, 1] in memory; 8-bit quantisation only happens at
file boundaries.  All binary formats are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import (
    DimensionError,
    FormatError,
    MagicMismatch,
    RangeError,
    TruncatedPayload,
    VersionMismatch,
)

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

TENSOR_MAGIC = b"DSTN"
CHECKPOINT_MAGIC = b"DSCK"
FORMAT_VERSION = 1


@dataclass
class ImageBatch:
    """Images ``data`` [N, 3, H, W] in [0, 1] with integer ``labels`` [N]."""

    data: np.ndarray
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise DimensionError(f"image data must be [N, 3, H, W], got {list(self.data.shape)}")
        if len(self.data) < 1:
            raise DimensionError("an ImageBatch needs at least one image")
        if self.labels.shape != (len(self.data),):
            raise DimensionError(
                f"{len(self.labels)} labels for {len(self.data)} images"
            )
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise RangeError("pixel values outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise RangeError(f"labels outside [0, {self.num_classes - 1}]")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def hw(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def subset(self, index) -> "ImageBatch":
        return ImageBatch(self.data[index], self.labels[index], self.num_classes)

    def with_data(self, data: np.ndarray) -> "ImageBatch":
        return ImageBatch(data, self.labels.copy(), self.num_classes)

    @staticmethod
    def concat(batches: Iterable["ImageBatch"]) -> "ImageBatch":
        batches = list(batches)
        return ImageBatch(
            np.concatenate([b.data for b in batches]),
            np.concatenate([b.labels for b in batches]),
            batches[0].num_classes,
        )


@dataclass
class Watermark:
    """A watermark: colour planes ``rgb`` [3, H, W] and matte ``alpha`` [1, H, W]."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DimensionError(f"rgb must be [3, H, W], got {list(self.rgb.shape)}")
        if self.alpha.shape != (1,) + self.rgb.shape[1:]:
            raise DimensionError(
                f"alpha {list(self.alpha.shape)} does not match rgb {list(self.rgb.shape)}"
            )
        for plane in (self.rgb, self.alpha):
            if plane.min() < 0.0 or plane.max() > 1.0:
                raise RangeError("watermark values outside [0, 1]")

    @property
    def hw(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    def rgba(self) -> np.ndarray:
        return np.concatenate([self.rgb, self.alpha])

    @classmethod
    def from_rgba(cls, planes: np.ndarray) -> "Watermark":
        planes = np.asarray(planes)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise DimensionError(f"expected [4, H, W] watermark planes, got {list(planes.shape)}")
        return cls(planes[:3], planes[3:4])


# --------------------------------------------------------------------------
# CIFAR-10 binary format


def decode_cifar(buf: bytes) -> ImageBatch:
    """Parse CIFAR-10 binary records (1 label byte + 3072 channel-planar pixels)."""
    n, rest = divmod(len(buf), RECORD_BYTES)
    if rest or n == 0:
        raise FormatError(
            f"CIFAR batch length {len(buf)} is not a positive multiple of {RECORD_BYTES}",
            offset=len(buf),
        )
    records = np.frombuffer(buf, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise RangeError(f"label {labels[i]} > {NUM_CLASSES - 1}", offset=i * RECORD_BYTES)
    data = records[:, 1:].reshape((n,) + IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return ImageBatch(data, labels)


def quantize(data: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8, rounding half to even."""
    return np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_cifar(batch: ImageBatch) -> bytes:
    if batch.data.shape[1:] != IMAGE_SHAPE:
        raise DimensionError(f"CIFAR records hold {IMAGE_SHAPE} images, got {batch.data.shape[1:]}")
    n = len(batch)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = batch.labels.astype(np.uint8)
    out[:, 1:] = quantize(batch.data).reshape(n, -1)
    return out.tobytes()


def load_cifar_batch(path) -> ImageBatch:
    return decode_cifar(Path(path).read_bytes())


def save_cifar_batch(batch: ImageBatch, path) -> None:
    Path(path).write_bytes(encode_cifar(batch))


def load_cifar_dir(data_dir) -> tuple[ImageBatch, ImageBatch]:
    """Load the standard ``data_batch_{1..5}.bin`` / ``test_batch.bin`` layout."""
    data_dir = Path(data_dir)
    if (data_dir / "cifar-10-batches-bin").is_dir():
        data_dir = data_dir / "cifar-10-batches-bin"
    train_files = sorted(data_dir.glob("data_batch_*.bin"))
    test_file = data_dir / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {data_dir}")
    train = ImageBatch.concat(load_cifar_batch(p) for p in train_files)
    return train, load_cifar_batch(test_file)


# --------------------------------------------------------------------------
# raw tensors ("DSTN")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<BBB", FORMAT_VERSION, 0, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("tensor header truncated", offset=len(buf))
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {buf[:4]!r}", offset=0)
    version, dtype, rank = struct.unpack_from("<BBB", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset=4)
    if dtype != 0:
        raise FormatError(f"unsupported tensor dtype code {dtype}", offset=5)
    end = 7 + 4 * rank
    if len(buf) < end:
        raise FormatError("tensor dims truncated", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) != end + nbytes:
        raise FormatError(
            f"tensor payload is {len(buf) - end} bytes, expected {nbytes}", offset=len(buf)
        )
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def save_tensor(array: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------
# watermarks


def load_watermark(path, size: tuple[int, int] = (32, 32)) -> Watermark:
    """Read an 8-bit RGBA PNG (or a [4, H, W] DSTN tensor) as a Watermark.

    No resampling: a watermark whose size differs from ``size`` is rejected.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == TENSOR_MAGIC:
        planes = decode_tensor(raw)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise FormatError(f"watermark tensor must be [4, H, W], got {list(planes.shape)}")
    else:
        from PIL import Image

        try:
            img = Image.open(path)
            img.load()
        except Exception as exc:  # PIL raises a zoo of types
            raise FormatError(f"cannot decode image {path}: {exc}") from exc
        if img.mode in ("LA", "PA", "La") or (img.mode == "P" and "transparency" in img.info):
            img = img.convert("RGBA")
        if img.mode != "RGBA":
            raise FormatError(f"watermark {path.name} has mode {img.mode}, needs an alpha channel")
        planes = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / np.float32(255.0)
    hw = tuple(planes.shape[1:])
    if hw != tuple(size):
        raise DimensionError(f"watermark is {hw[0]}x{hw[1]}, images are {size[0]}x{size[1]}")
    return Watermark.from_rgba(planes)


def save_watermark_png(w: Watermark, path) -> None:
    from PIL import Image

    pixels = quantize(w.rgba()).transpose(1, 2, 0)
    Image.fromarray(pixels, mode="RGBA").save(path)


def default_watermark(size: int = 32) -> Watermark:
    """A simple copyright-style logo: a ring with a bar through it."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    ring = (r >= size * 0.28) & (r <= size * 0.38)
    bar = (np.abs(yy - c) <= size * 0.06) & (np.abs(xx - c) <= size * 0.22)
    alpha = (ring | bar).astype(np.float32)[None]
    rgb = np.stack(
        [np.full((size, size), 0.95), np.full((size, size), 0.85), 0.2 + 0.6 * xx / (size - 1)]
    ).astype(np.float32)
    return Watermark(rgb, alpha)


# --------------------------------------------------------------------------
# checkpoints ("DSCK")


@dataclass
class NetworkParams:
    """Ordered named tensors for one network plus provenance metadata."""

    arch: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    seed: int = 0
    step: int = 0

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "NetworkParams":
        return NetworkParams(
            self.arch, {k: v.detach().clone() for k, v in self.tensors.items()}, self.seed, self.step
        )

    def to(self, dtype: torch.dtype) -> "NetworkParams":
        return NetworkParams(
            self.arch, {k: v.detach().to(dtype) for k, v in self.tensors.items()}, self.seed, self.step
        )

    def num_values(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (
            (self.arch, self.seed, self.step) == (other.arch, other.seed, other.step)
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and a.dtype == b.dtype and torch.equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


def encode_checkpoint(params: NetworkParams) -> bytes:
    arch = params.arch.encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<B", FORMAT_VERSION),
        struct.pack("<H", len(arch)),
        arch,
        struct.pack("<QQ", params.seed, params.step),
        struct.pack("<I", len(params.tensors)),
    ]
    for name, t in params.tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(
                f"needed {n} bytes, {len(self.buf) - self.pos} left", offset=self.pos
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> NetworkParams:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatch(f"bad checkpoint magic {buf[:4]!r}", offset=0)
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<B")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}", offset=4)
    (alen,) = r.unpack("<H")
    try:
        arch = r.take(alen).decode()
        seed, step = r.unpack("<QQ")
        (count,) = r.unpack("<I")
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode()
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            payload = r.take(nbytes)
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}", offset=r.pos)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            tensors[name] = torch.from_numpy(arr)
    except UnicodeDecodeError as exc:
        raise FormatError(f"undecodable name: {exc}", offset=r.pos) from exc
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    return NetworkParams(arch, tensors, seed, step)


def save_checkpoint(params: NetworkParams, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path) -> NetworkParams:
    return decode_checkpoint(Path(path).read_bytes())
