"""Layer-list architectures for the stamper (W), autoencoder (V), discriminator (D)
and the classifiers (F / F').

Networks are plain data: an :class:`ArchitectureSpec` is a list of
:class:`LayerSpec` with a fixed input shape, and parameters live in a
:class:`~deepstamp.dataio.NetworkParams` whose entry order follows the layer
order.  :func:`forward` interprets the list with ``torch.nn.functional``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import NetworkParams, Watermark
from .errors import DimensionError, SpecError

LayerKind = Literal[
    "conv",
    "tconv",
    "dense",
    "relu",
    "lrelu",
    "sigmoid",
    "tanh",
    "batchnorm",
    "maxpool",
    "gap",
    "flatten",
]

LEAK = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

ARCH_IDS = ("W", "V", "D", "D-literal", "F-small", "F-alexnet", "F-vgg16")
# accepted in configs for completeness, but there is no layer-list form
UNBUILDABLE = {"F-resnet50": "residual blocks are not expressible as a layer list"}


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    name: str = ""

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind in ("conv", "tconv"):
            c, h, w = shape
            if c != self.in_channels:
                raise DimensionError(f"{self.name}: expects {self.in_channels} channels, got {c}")
            k, s, p = self.kernel, self.stride, self.padding
            if self.kind == "conv":
                h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            else:
                h, w = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
            if h < 1 or w < 1:
                raise DimensionError(f"{self.name}: spatial size collapses to {h}x{w}")
            return (self.out_channels, h, w)
        if self.kind == "dense":
            if shape != (self.in_channels,):
                raise DimensionError(f"{self.name}: expects ({self.in_channels},), got {shape}")
            return (self.out_channels,)
        if self.kind == "batchnorm":
            if shape[0] != self.in_channels:
                raise DimensionError(f"{self.name}: expects {self.in_channels} channels")
            return shape
        if self.kind == "maxpool":
            c, h, w = shape
            return (c, h // 2, w // 2)
        if self.kind == "gap":
            return (shape[0], 1, 1)
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "conv":
            return {"w": (self.out_channels, self.in_channels, k, k), "b": (self.out_channels,)}
        if self.kind == "tconv":
            return {"w": (self.in_channels, self.out_channels, k, k), "b": (self.out_channels,)}
        if self.kind == "dense":
            return {"w": (self.out_channels, self.in_channels), "b": (self.out_channels,)}
        if self.kind == "batchnorm":
            c = (self.in_channels,)
            return {"gamma": c, "beta": c, "mean": c, "var": c}
        return {}

    @property
    def fan_in(self) -> int:
        return self.in_channels * max(self.kernel, 1) ** 2


BUFFER_SUFFIXES = (".mean", ".var")


@dataclass(frozen=True)
class ArchitectureSpec:
    id: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...] = ()

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape after each layer (batch dim excluded); raises if the algebra does not close."""
        out, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            f"{layer.name}.{key}": shape
            for layer in self.layers
            for key, shape in layer.param_shapes().items()
        }


def _named(layers: list[LayerSpec]) -> tuple[LayerSpec, ...]:
    counts: dict[str, int] = {}
    out = []
    for layer in layers:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        out.append(
            LayerSpec(
                layer.kind,
                layer.in_channels,
                layer.out_channels,
                layer.kernel,
                layer.stride,
                layer.padding,
                f"{layer.kind}{counts[layer.kind]}",
            )
        )
    return tuple(out)


def _conv(cin, cout, k=3, s=1, p=1):
    return LayerSpec("conv", cin, cout, k, s, p)


def _tconv(cin, cout, k=3, s=1, p=1):
    return LayerSpec("tconv", cin, cout, k, s, p)


def _dense(cin, cout):
    return LayerSpec("dense", cin, cout)


def _act(kind):
    return LayerSpec(kind)


def _bn(c):
    return LayerSpec("batchnorm", c)


def _pool():
    return LayerSpec("maxpool")


def _conv_stack(widths, final):
    layers = []
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(_conv(cin, cout))
        layers.append(_act(final if i == len(widths) - 2 else "relu"))
    return layers


def _classifier_head(layers, hw, channels, pools, hidden, num_classes):
    h, w = hw[0] >> pools, hw[1] >> pools
    flat = channels * h * w
    layers.append(_act("flatten"))
    for width in hidden:
        layers += [_dense(flat, width), _act("relu")]
        flat = width
    layers.append(_dense(flat, num_classes))
    return layers


@lru_cache(maxsize=None)
def architecture(arch_id: str, hw: tuple[int, int] = (32, 32), num_classes: int = 10) -> ArchitectureSpec:
    """Layer list for ``arch_id`` at spatial size ``hw`` (validated on construction)."""
    if arch_id == "W":
        layers, cin, out = _conv_stack([7, 32, 64, 32, 4], "sigmoid"), 7, (4, *hw)
    elif arch_id == "V":
        layers, cin, out = _conv_stack([4, 32, 64, 64, 32, 4], "sigmoid"), 4, (4, *hw)
    elif arch_id == "D":
        layers = [
            _conv(3, 32, 4, 2, 1), _act("lrelu"),
            _conv(32, 64, 4, 2, 1), _act("lrelu"),
            _conv(64, 1, 3, 1, 1), _act("gap"), _act("flatten"),
        ]
        cin, out = 3, (1,)
    elif arch_id == "D-literal":
        layers = [
            _tconv(3, 32), _act("lrelu"),
            _tconv(32, 64), _act("lrelu"),
            _tconv(64, 1), _act("gap"), _act("flatten"),
        ]
        cin, out = 3, (1,)
    elif arch_id == "F-small":
        layers = [
            _conv(3, 16), _act("relu"), _pool(),
            _conv(16, 32), _act("relu"), _pool(),
            _conv(32, 32), _act("relu"), _pool(),
        ]
        layers = _classifier_head(layers, hw, 32, 3, [128], num_classes)
        cin, out = 3, (num_classes,)
    elif arch_id == "F-alexnet":
        layers = [
            _conv(3, 32, 5, 1, 2), _bn(32), _act("relu"), _pool(),
            _conv(32, 64, 5, 1, 2), _bn(64), _act("relu"), _pool(),
            _conv(64, 96), _act("relu"),
            _conv(96, 96), _act("relu"),
            _conv(96, 64), _act("relu"), _pool(),
        ]
        layers = _classifier_head(layers, hw, 64, 3, [256, 128], num_classes)
        cin, out = 3, (num_classes,)
    elif arch_id == "F-vgg16":
        layers, c = [], 3
        for block in ([64, 64], [128, 128], [256] * 3, [512] * 3, [512] * 3):
            for width in block:
                layers += [_conv(c, width), _bn(width), _act("relu")]
                c = width
            layers.append(_pool())
        layers = _classifier_head(layers, hw, 512, 5, [512], num_classes)
        cin, out = 3, (num_classes,)
    elif arch_id in UNBUILDABLE:
        raise SpecError(f"{arch_id} is not available: {UNBUILDABLE[arch_id]}")
    else:
        raise SpecError(f"unknown architecture id {arch_id!r}")
    spec = ArchitectureSpec(arch_id, _named(layers), (cin, *hw), out)
    got = spec.shapes()[-1]
    if got != out:
        raise DimensionError(f"{arch_id}: layer list ends at {got}, expected {out}")
    return spec


def is_classifier(arch_id: str) -> bool:
    return arch_id.startswith("F-")


def build(arch_id: str, seed: int, hw: tuple[int, int] = (32, 32)) -> NetworkParams:
    """Fresh parameters: weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases 0."""
    spec = architecture(arch_id, tuple(hw))
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for layer in spec.layers:
        for key, shape in layer.param_shapes().items():
            if key == "w":
                bound = math.sqrt(1.0 / layer.fan_in)
                t = (torch.rand(shape, generator=gen, dtype=torch.float32) * 2 - 1) * bound
            elif key in ("gamma", "var"):
                t = torch.ones(shape)
            else:
                t = torch.zeros(shape)
            tensors[f"{layer.name}.{key}"] = t
    return NetworkParams(arch_id, tensors, seed=seed, step=0)


def trainable_names(params: NetworkParams) -> list[str]:
    return [k for k in params.tensors if not k.endswith(BUFFER_SUFFIXES)]


_pattern_log: list | None = None


class record_patterns:
    """Collect ReLU sign masks and max-pool winners from every forward inside the block.

    Finite-difference gradient checks use this to detect probes that straddle
    a kink.
    """

    def __enter__(self) -> list:
        global _pattern_log
        self.prev, _pattern_log = _pattern_log, []
        return _pattern_log

    def __exit__(self, *exc):
        global _pattern_log
        _pattern_log = self.prev


def forward(
    spec: ArchitectureSpec,
    params: dict[str, torch.Tensor],
    x: torch.Tensor,
    train: bool = False,
) -> torch.Tensor:
    """Run the layer list on a batch ``x`` [N, *input_shape].

    In ``train`` mode batchnorm normalises with batch statistics and updates the
    running-statistic tensors in ``params`` in place; otherwise it uses them.
    Discriminators return logits [N].
    """
    if tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(
            f"{spec.id} layer 0: input shape {tuple(x.shape[1:])}, expected {spec.input_shape}"
        )
    for i, layer in enumerate(spec.layers):
        p = layer.name + "."
        kind = layer.kind
        try:
            if kind == "conv":
                x = F.conv2d(x, params[p + "w"], params[p + "b"], layer.stride, layer.padding)
            elif kind == "tconv":
                x = F.conv_transpose2d(x, params[p + "w"], params[p + "b"], layer.stride, layer.padding)
            elif kind == "dense":
                x = F.linear(x, params[p + "w"], params[p + "b"])
            elif kind == "relu":
                if _pattern_log is not None:
                    _pattern_log.append(x > 0)
                x = F.relu(x)
            elif kind == "lrelu":
                if _pattern_log is not None:
                    _pattern_log.append(x > 0)
                x = F.leaky_relu(x, LEAK)
            elif kind == "sigmoid":
                x = torch.sigmoid(x)
            elif kind == "tanh":
                x = torch.tanh(x)
            elif kind == "batchnorm":
                x = F.batch_norm(
                    x, params[p + "mean"], params[p + "var"], params[p + "gamma"], params[p + "beta"],
                    training=train, momentum=BN_MOMENTUM, eps=BN_EPS,
                )
            elif kind == "maxpool":
                if _pattern_log is not None:
                    x, winners = F.max_pool2d(x, 2, return_indices=True)
                    _pattern_log.append(winners)
                else:
                    x = F.max_pool2d(x, 2)
            elif kind == "gap":
                x = x.mean(dim=(2, 3), keepdim=True)
            elif kind == "flatten":
                x = x.flatten(1)
        except RuntimeError as exc:
            raise DimensionError(f"{spec.id} layer {i} ({layer.name}): {exc}") from exc
    if spec.output_shape == (1,):
        x = x[:, 0]
    return x


def run(params: NetworkParams, x: torch.Tensor, train: bool = False) -> torch.Tensor:
    """:func:`forward` with the architecture looked up from ``params`` and the input size."""
    spec = architecture(params.arch, tuple(x.shape[2:]))
    return forward(spec, params.tensors, x, train=train)


def stamper_input(x: torch.Tensor, w_planes: torch.Tensor) -> torch.Tensor:
    """Concatenate images [N,3,H,W] with the watermark [4,H,W] into [N,7,H,W]."""
    return torch.cat([x, w_planes.expand(len(x), -1, -1, -1)], dim=1)


def synthesize_tensor(params_w: NetworkParams, x: torch.Tensor, w_planes: torch.Tensor) -> torch.Tensor:
    return run(params_w, stamper_input(x, w_planes))


@torch.no_grad()
def synthesize(
    params_w: NetworkParams, x: np.ndarray, w: Watermark, batch_size: int = 256
) -> np.ndarray:
    """Per-image synthesised watermarks [N, 4, H, W] in [0, 1] for images ``x`` [N, 3, H, W]."""
    if x.shape[1] != 3 or x.shape[2:] != w.rgb.shape[1:]:
        raise DimensionError(f"images {list(x.shape[1:])} vs watermark {list(w.rgb.shape[1:])}")
    planes = torch.from_numpy(w.rgba())
    chunks = [
        synthesize_tensor(params_w, torch.from_numpy(np.ascontiguousarray(x[i : i + batch_size])), planes)
        for i in range(0, len(x), batch_size)
    ]
    return torch.cat(chunks).numpy()


@torch.no_grad()
def predict_logits(params: NetworkParams, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    return torch.cat(
        [run(params, torch.from_numpy(np.ascontiguousarray(x[i : i + batch_size]))) for i in range(0, len(x), batch_size)]
    ).numpy()
