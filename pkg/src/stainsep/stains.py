"""Beer-Lambert stain model: optical density, stain matrices, decoding, renders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

STAIN_NAMES = ("H", "CDX2", "MUC2", "MUC5", "CD8")

# OD column vectors (R, G, B) for the colorectal mIHC panel, columns in STAIN_NAMES order.
INITIAL_STAINS = np.array([
    [0.620, 0.637, 0.458],
    [0.290, 0.832, 0.473],
    [0.033, 0.343, 0.939],
    [0.741, 0.294, 0.604],
    [0.300, 0.491, 0.818],
]).T

LEARNED_STAINS = np.array([
    [0.705, 0.581, 0.408],
    [0.242, 0.843, 0.480],
    [0.028, 0.239, 0.971],
    [0.737, 0.300, 0.606],
    [0.330, 0.536, 0.777],
]).T

DEFAULT_OD_EPS = 1e-6


@dataclass
class StainMatrix:
    """3 x K matrix of stain OD vectors (one column per stain) with names."""

    columns: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        cols = np.array(self.columns, dtype=np.float64)
        if cols.ndim != 2 or cols.shape[0] != 3:
            raise ValueError(f"stain matrix must be 3 x K, got {cols.shape}")
        if not np.all(np.isfinite(cols)):
            raise ValueError("stain matrix has non-finite entries")
        if np.any(cols < 0):
            raise ValueError("stain matrix entries must be nonnegative")
        self.columns = cols
        names = tuple(self.names) or tuple(f"stain{k}" for k in range(cols.shape[1]))
        if len(names) != cols.shape[1]:
            raise ValueError(f"{len(names)} names for {cols.shape[1]} stains")
        self.names = names

    @property
    def K(self) -> int:
        return self.columns.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown stain {name!r}; have {list(self.names)}") from None

    @classmethod
    def initial_panel(cls) -> "StainMatrix":
        return cls(INITIAL_STAINS, STAIN_NAMES)


@dataclass
class ConcentrationMap:
    """H x W x K nonnegative stain concentrations."""

    values: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"concentration map must be H x W x K, got {v.shape}")
        self.values = v
        names = tuple(self.names) or tuple(f"stain{k}" for k in range(v.shape[2]))
        if len(names) != v.shape[2]:
            raise ValueError(f"{len(names)} names for {v.shape[2]} channels")
        self.names = names

    @property
    def K(self) -> int:
        return self.values.shape[2]


def check_rgb(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != 3:
        raise ValueError(f"expected trailing RGB axis of size 3, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("RGB patch has non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"RGB values must lie in [0, 1]; got min={lo:g}, max={hi:g}")
    return x


def rgb_to_od(x: np.ndarray, eps: float = DEFAULT_OD_EPS, clamp: bool = True) -> np.ndarray:
    """Channel-wise optical density ``-log(x + eps)``.

    With ``clamp`` the tiny negative values produced near white are set to 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    od = -np.log(check_rgb(x) + eps)
    return np.maximum(od, 0.0) if clamp else od


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.exp(-np.asarray(od, dtype=np.float64))


def normalize_columns(S: StainMatrix) -> StainMatrix:
    norms = np.linalg.norm(S.columns, axis=0)
    for name, n in zip(S.names, norms):
        if n == 0:
            raise ValueError(f"stain {name!r} has a zero OD vector")
    return StainMatrix(S.columns / norms, S.names)


def _stain_columns(S) -> np.ndarray:
    return S.columns if isinstance(S, StainMatrix) else np.asarray(S, dtype=np.float64)


def _conc_values(C) -> np.ndarray:
    return C.values if isinstance(C, ConcentrationMap) else np.asarray(C, dtype=np.float64)


def bl_decode(S, C) -> np.ndarray:
    """Transmitted RGB ``exp(-S c)`` for every pixel of an H x W x K map."""
    cols, c = _stain_columns(S), _conc_values(C)
    if c.shape[-1] != cols.shape[1]:
        raise ValueError(f"stain matrix has K={cols.shape[1]} but map has {c.shape[-1]} channels")
    return np.exp(-(c @ cols.T))


def _check_index(k: int, K: int) -> None:
    if not 0 <= k < K:
        raise IndexError(f"stain index {k} out of range for K={K}")


def render_single_channel(S, C, k: int) -> np.ndarray:
    """Decode with every channel except ``k`` zeroed."""
    c = _conc_values(C)
    _check_index(k, c.shape[-1])
    only = np.zeros_like(c)
    only[..., k] = c[..., k]
    return bl_decode(S, only)


def render_knockout(S, C, k: int) -> np.ndarray:
    """Decode with channel ``k`` zeroed."""
    c = _conc_values(C)
    _check_index(k, c.shape[-1])
    ko = np.array(c, copy=True)
    ko[..., k] = 0
    return bl_decode(S, ko)


# --------------------------------------------------------- differentiable path

def stain_tensor_normalized(S: ad.Tensor) -> ad.Tensor:
    """Unit-normalise the columns of a 3 x K tensor."""
    return ad.div(S, ad.sqrt(ad.sum(ad.square(S), axis=0, keepdims=True)))


def decode_tensor(S: ad.Tensor, C: ad.Tensor) -> ad.Tensor:
    """Differentiable decoder: (3, K) stains and (N, K, H, W) maps to (N, 3, H, W) RGB."""
    n, k, h, w = C.shape
    if S.shape != (3, k):
        raise ad.ShapeError("decode", S.shape, C.shape)
    flat = ad.reshape(ad.transpose(C, (1, 0, 2, 3)), (k, n * h * w))
    od = ad.matmul(S, flat)
    od = ad.transpose(ad.reshape(od, (3, n, h, w)), (1, 0, 2, 3))
    return ad.exp(ad.neg(od))


def rgb_to_od_tensor(x: ad.Tensor, eps: float = DEFAULT_OD_EPS) -> ad.Tensor:
    """Unclamped differentiable OD for the training path."""
    return ad.neg(ad.log(x, eps))


def hwc_to_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def nchw_to_hwc(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = x.transpose(0, 2, 3, 1)
    return out[0] if out.shape[0] == 1 else out


def angle_between(u: Sequence[float], v: Sequence[float]) -> float:
    """Angle in degrees between two vectors."""
    u, v = np.asarray(u, float), np.asarray(v, float)
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
