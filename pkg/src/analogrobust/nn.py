"""The desk-scale CNN: layer specification, initialisation and forward pass.

All matrix-shaped weights are stored input-major, ``(fan_in, fan_out)``, so
that a layer's weight matrix is exactly the ``rows x cols`` block that gets
mapped onto crossbar tiles. Convolution kernels are kept in lowered
im2col form for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .serialization import load_arrays, save_arrays

# A linear hook receives (layer name, 2-D input tensor, weight tensor) and
# returns the 2-D pre-bias output. Platforms swap it to quantise or to route
# the product through analog tiles.
LinearFn = Callable[[str, T.Tensor, T.Tensor], T.Tensor]


def exact_linear(name: str, x: T.Tensor, w: T.Tensor) -> T.Tensor:
    return T.matmul(x, w)


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | dense | relu | maxpool | flatten
    name: str = ""
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    pad: int = 0

    @property
    def is_linear(self) -> bool:
        return self.kind in ("conv", "dense")


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[Layer]
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=np.float32))

    @property
    def linear_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.is_linear]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [vars(layer) for layer in self.layers],
            "mean": np.asarray(self.mean).tolist(),
            "std": np.asarray(self.std).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            layers=[Layer(**layer) for layer in d["layers"]],
            mean=np.asarray(d["mean"], dtype=np.float32),
            std=np.asarray(d["std"], dtype=np.float32),
        )


def small_cnn(input_shape=(1, 28, 28), num_classes=10, channels=(8, 16), hidden=64) -> NetworkSpec:
    """Two 3x3 conv blocks (conv, relu, 2x2 max-pool) then two dense layers."""
    c, h, w = input_shape
    c1, c2 = channels
    if h % 4 or w % 4:
        raise DimensionError(f"spatial extents {h}x{w} must be divisible by 4")
    flat = c2 * (h // 4) * (w // 4)
    layers = [
        Layer("conv", "conv1", c * 9, c1, kernel=3, pad=1),
        Layer("relu"),
        Layer("maxpool", kernel=2),
        Layer("conv", "conv2", c1 * 9, c2, kernel=3, pad=1),
        Layer("relu"),
        Layer("maxpool", kernel=2),
        Layer("flatten"),
        Layer("dense", "fc1", flat, hidden),
        Layer("relu"),
        Layer("dense", "fc2", hidden, num_classes),
    ]
    return NetworkSpec(tuple(input_shape), num_classes, layers)


def init_params(spec: NetworkSpec, seed: int) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in spec.linear_layers:
        std = np.sqrt(2.0 / layer.fan_in)
        params[f"{layer.name}.weight"] = (rng.standard_normal((layer.fan_in, layer.fan_out)) * std).astype(np.float32)
        params[f"{layer.name}.bias"] = np.zeros(layer.fan_out, dtype=np.float32)
    return params


def forward(
    spec: NetworkSpec,
    params: dict[str, T.Tensor],
    x: T.Tensor,
    linear: LinearFn = exact_linear,
) -> T.Tensor:
    """Logits for pixel-space input ``x`` (N, C, H, W); normalisation is built in."""
    x = T.tensor(x)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(f"input {x.shape} does not match network input {spec.input_shape}")
    mean = np.asarray(spec.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    inv_std = (1.0 / np.asarray(spec.std, dtype=np.float32)).reshape(1, -1, 1, 1)
    h = T.mul(T.sub(x, mean), inv_std)
    for layer in spec.layers:
        if layer.kind == "conv":
            n, _, hh, ww = h.shape
            cols = T.im2col(h, layer.kernel, 1, layer.pad)
            z = linear(layer.name, cols, params[f"{layer.name}.weight"])
            z = T.add(z, params[f"{layer.name}.bias"])
            oh = hh + 2 * layer.pad - layer.kernel + 1
            ow = ww + 2 * layer.pad - layer.kernel + 1
            h = T.transpose(T.reshape(z, (n, oh, ow, layer.fan_out)), (0, 3, 1, 2))
        elif layer.kind == "dense":
            z = linear(layer.name, h, params[f"{layer.name}.weight"])
            h = T.add(z, params[f"{layer.name}.bias"])
        elif layer.kind == "relu":
            h = T.relu(h)
        elif layer.kind == "maxpool":
            h = T.maxpool2d(h, layer.kernel)
        elif layer.kind == "flatten":
            h = T.flatten(h)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def save_params(stem, spec: NetworkSpec, params: dict[str, np.ndarray], metadata: dict | None = None):
    meta = {"network": spec.to_dict(), **(metadata or {})}
    return save_arrays(stem, params, meta)


def load_params(stem) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    arrays, meta = load_arrays(stem)
    return NetworkSpec.from_dict(meta["network"]), arrays, meta
