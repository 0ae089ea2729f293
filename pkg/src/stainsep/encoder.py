"""Compact U-Net mapping an RGB patch to K nonnegative concentration channels."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict

import numpy as np

from . import autodiff as ad
from .stains import ConcentrationMap, hwc_to_nchw, nchw_to_hwc

INPUT_OD_EPS = 1e-3


@dataclass
class EncoderConfig:
    K: int = 5
    base_channels: int = 32
    residual_blocks: int = 2
    kernel_size: int = 3
    activation: str = "softplus"
    input_transform: str = "od"
    head_bias: float = -2.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.residual_blocks < 0:
            raise ValueError("residual_blocks must be >= 0")
        if self.activation not in ("softplus", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_transform not in ("od", "rgb"):
            raise ValueError(f"unknown input_transform {self.input_transform!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def as_tensors(self, requires_grad: bool = False, dtype=None) -> Dict[str, ad.Tensor]:
        return {k: ad.Tensor(v.astype(dtype or v.dtype), requires_grad=requires_grad)
                for k, v in self.tensors.items()}


def layer_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    """Ordered kernel shapes (O, I, k, k) of every conv layer."""
    b, k = cfg.base_channels, cfg.kernel_size
    shapes = {
        "inc": (b, 3, k, k),
        "down1.0": (b, b, k, k),
        "down1.1": (b, b, k, k),
        "down2.0": (2 * b, b, k, k),
        "down2.1": (2 * b, 2 * b, k, k),
        "bottleneck": (4 * b, 2 * b, k, k),
    }
    for r in range(cfg.residual_blocks):
        shapes[f"res{r}.0"] = (4 * b, 4 * b, k, k)
        shapes[f"res{r}.1"] = (4 * b, 4 * b, k, k)
    shapes.update({
        "up1.0": (2 * b, 4 * b, k, k),
        "up1.1": (2 * b, 4 * b, k, k),
        "up2.0": (b, 2 * b, k, k),
        "up2.1": (b, 2 * b, k, k),
        "head": (cfg.K, b, 1, 1),
    })
    return shapes


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> EncoderParams:
    """He-initialised parameters; identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(cfg).items():
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in)
        if name.startswith("res") and name.endswith(".1"):
            std *= 0.1  # keep the residual branch near identity at init
        tensors[f"{name}.w"] = (rng.standard_normal(shape) * std).astype(np.float32)
        bias = np.full(shape[0], cfg.head_bias if name == "head" else 0.0)
        tensors[f"{name}.b"] = bias.astype(np.float32)
    return EncoderParams(cfg, tensors, seed)


def receptive_field(cfg: EncoderConfig) -> int:
    """Receptive field (pixels, one side) of a head output along the deepest path."""
    k = cfg.kernel_size
    rf, jump = 1, 1

    def conv(n=1):
        nonlocal rf
        rf += n * (k - 1) * jump

    def pool():
        nonlocal rf, jump
        rf += jump
        jump *= 2

    conv(1)
    conv(2)
    pool()
    conv(2)
    pool()
    conv(1 + 2 * cfg.residual_blocks)
    jump //= 2
    conv(2)
    jump //= 2
    conv(2)
    return rf


def _act(cfg: EncoderConfig, x: ad.Tensor) -> ad.Tensor:
    return ad.softplus(x) if cfg.activation == "softplus" else ad.relu(x)


def forward(cfg: EncoderConfig, p: Dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    """Differentiable forward pass: (N, 3, H, W) RGB to (N, K, H, W) concentrations."""
    n, c, h, w = x.shape
    if c != 3:
        raise ad.ShapeError("encode", x.shape, (n, 3, h, w))
    if h % 4 or w % 4:
        raise ValueError(f"encode: height and width must be divisible by 4 (got {h}x{w}); "
                         f"pad the patch to {-(-h // 4) * 4}x{-(-w // 4) * 4}")
    pad = cfg.kernel_size // 2

    def conv(name, t, act=True):
        out = ad.conv2d(t, p[f"{name}.w"], padding=pad if name != "head" else 0)
        out = ad.add(out, ad.reshape(p[f"{name}.b"], (1, -1, 1, 1)))
        return _act(cfg, out) if act else out

    if cfg.input_transform == "od":
        data = -np.log(np.maximum(x.data, 0.0) + INPUT_OD_EPS)
        x = ad.Tensor(data.astype(x.dtype))
    h0 = conv("inc", x)
    skip1 = conv("down1.1", conv("down1.0", h0))
    skip2 = conv("down2.1", conv("down2.0", ad.avg_pool2(skip1)))
    z = conv("bottleneck", ad.avg_pool2(skip2))
    for r in range(cfg.residual_blocks):
        z = ad.add(z, conv(f"res{r}.1", conv(f"res{r}.0", z), act=False))
    u = conv("up1.0", ad.upsample2(z))
    u = conv("up1.1", ad.concat([u, skip2], axis=1))
    u = conv("up2.0", ad.upsample2(u))
    u = conv("up2.1", ad.concat([u, skip1], axis=1))
    return ad.softplus(conv("head", u, act=False))


def encode(params: EncoderParams, x: np.ndarray, names=()) -> ConcentrationMap:
    """Concentrations for an H x W x 3 patch (no gradient tracking)."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 patch, got {x.shape}")
    dtype = np.float32
    with ad.no_grad():
        out = forward(params.config, params.as_tensors(dtype=dtype),
                      ad.Tensor(hwc_to_nchw(x).astype(dtype)))
    return ConcentrationMap(nchw_to_hwc(out.data), tuple(names))
