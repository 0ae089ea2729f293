"""Training loss terms and their weighted sum.

All L1 norms are mean absolute errors, so loss weights do not depend on patch
size. Maps are (N, K, H, W) tensors; H x W x K arrays are accepted too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, Sequence

import numpy as np

from . import autodiff as ad

ENTROPY_EPS = 1e-8
MASK_EPS = 1e-8

CSV_HEADER = ("step", "rec_l1", "rec_perc", "ent", "col", "ov", "mask", "total",
              "n_tau", "n_mask")


@dataclass
class LossWeights:
    lambda_ent: float = 0.05
    lambda_col: float = 1.0
    lambda_ov: float = 0.1
    lambda_mask: float = 0.5
    perceptual_weight: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    rec_l1: float = 0.0
    rec_perceptual: float = 0.0
    ent: float = 0.0
    col: float = 0.0
    ov: float = 0.0
    mask: float = 0.0
    total: float = 0.0
    n_tau: int = 0
    n_mask: int = 0
    n_overlap: int = 0

    def csv_row(self, step: int) -> str:
        vals = (self.rec_l1, self.rec_perceptual, self.ent, self.col, self.ov,
                self.mask, self.total)
        return ",".join([str(step)] + [repr(float(v)) for v in vals]
                        + [str(self.n_tau), str(self.n_mask)])


def as_nchw_tensor(C) -> ad.Tensor:
    if isinstance(C, ad.Tensor):
        return C
    arr = np.asarray(C)
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)[None]
    elif arr.ndim != 4:
        raise ValueError(f"expected H x W x K or N x K x H x W, got {arr.shape}")
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else ad.get_default_dtype()
    return ad.Tensor(np.ascontiguousarray(arr, dtype=dtype))


# ---------------------------------------------------------- feature extractor

@dataclass
class FeatureExtractor:
    """Fixed multi-stage convolution stack whose stage outputs are compared.

    Each stage is ``conv(kernel, stride, padding=k//2)`` followed by ReLU when
    ``rectify`` is set. Kernels are never trained.
    """

    kernels: Sequence[np.ndarray] = field(default_factory=list)
    strides: Sequence[int] = field(default_factory=list)
    rectify: bool = True
    center: float = 0.5

    def __post_init__(self):
        self.kernels = [np.asarray(k) for k in self.kernels]
        if len(self.strides) != len(self.kernels):
            raise ValueError("one stride per stage required")
        for prev, k in zip([None] + self.kernels[:-1], self.kernels):
            if k.ndim != 4:
                raise ValueError(f"stage kernel must be OIHW, got {k.shape}")
            if prev is not None and prev.shape[0] != k.shape[1]:
                raise ValueError(f"stage width mismatch {prev.shape} -> {k.shape}")

    @property
    def num_stages(self) -> int:
        return len(self.kernels)

    def features(self, x: ad.Tensor) -> list:
        h = ad.sub(x, self.center) if self.center else x
        taps = []
        for k, s in zip(self.kernels, self.strides):
            h = ad.conv2d(h, ad.Tensor(k.astype(x.dtype)), stride=s, padding=k.shape[-1] // 2)
            if self.rectify:
                h = ad.relu(h)
            taps.append(h)
        return taps

    @classmethod
    def default(cls, seed: int = 0, widths=(16, 32, 64, 64)) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        kernels, cin = [], 3
        for w in widths:
            k = rng.standard_normal((w, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            kernels.append(k.astype(np.float64))
            cin = w
        return cls(kernels, [1] + [2] * (len(widths) - 1))

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        k = np.eye(3).reshape(3, 3, 1, 1)
        return cls([k], [1], rectify=False, center=0.0)

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], prefix: str = "extractor.") -> "FeatureExtractor":
        """Build from tensors named ``{prefix}stage{i}.w`` plus optional ``{prefix}strides``."""
        stages = sorted(int(n[len(prefix) + 5:].split(".")[0]) for n in tensors
                        if n.startswith(prefix + "stage") and n.endswith(".w"))
        if not stages:
            raise ValueError(f"no '{prefix}stage<i>.w' tensors found")
        kernels = [tensors[f"{prefix}stage{i}.w"] for i in stages]
        strides = tensors.get(prefix + "strides")
        strides = [int(s) for s in strides] if strides is not None else [1] + [2] * (len(kernels) - 1)
        return cls(kernels, strides)

    def to_tensors(self, prefix: str = "extractor.") -> Dict[str, np.ndarray]:
        out = {f"{prefix}stage{i}.w": np.asarray(k, dtype=np.float32)
               for i, k in enumerate(self.kernels)}
        out[prefix + "strides"] = np.asarray(self.strides, dtype=np.float32)
        return out


# ------------------------------------------------------------------- terms

def loss_reconstruction(xhat: ad.Tensor, x, extractor: FeatureExtractor | None = None,
                        perceptual_weight: float = 2.0):
    """Image-domain plus perceptual L1 fidelity.

    Returns ``(rec, l1, perceptual)``; ``rec = l1 + perceptual_weight * perceptual``.
    """
    x = as_nchw_tensor(x).detach()
    if xhat.shape != x.shape:
        raise ad.ShapeError("loss_reconstruction", xhat.shape, x.shape)
    l1 = ad.mean(ad.abs(ad.sub(xhat, x)))
    if extractor is None or extractor.num_stages == 0:
        perc = ad.Tensor(np.zeros((), dtype=xhat.dtype))
        return l1, l1, perc
    with ad.no_grad():
        target = extractor.features(x)
    terms = [ad.mean(ad.abs(ad.sub(f, t))) for f, t in zip(extractor.features(xhat), target)]
    perc = terms[0]
    for t in terms[1:]:
        perc = ad.add(perc, t)
    perc = ad.mul(perc, 1.0 / len(terms))
    return ad.add(l1, ad.mul(perc, perceptual_weight)), l1, perc


def loss_entropy(C, tau: float = 1e-2, eps: float = ENTROPY_EPS):
    """Mean per-pixel channel entropy over pixels whose total exceeds ``tau``.

    Returns ``(loss, n_pixels)``; the loss is 0 when no pixel qualifies.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    C = as_nchw_tensor(C)
    s = ad.sum(C, axis=1, keepdims=True)
    p = ad.div(C, ad.add(s, eps))
    h = ad.neg(ad.sum(ad.mul(p, ad.log(p, eps)), axis=1, keepdims=True))
    omega = s.data > tau
    return ad.masked_mean(h, omega), int(omega.sum())


def loss_color(S_phi, S_tilde):
    """Mean absolute difference between learned and initial stain matrices."""
    S_phi = S_phi if isinstance(S_phi, ad.Tensor) else ad.Tensor(np.asarray(S_phi, float))
    S_tilde = np.asarray(getattr(S_tilde, "columns", S_tilde), dtype=S_phi.dtype)
    if S_phi.shape != S_tilde.shape:
        raise ad.ShapeError("loss_color", S_phi.shape, S_tilde.shape)
    return ad.mean(ad.abs(ad.sub(S_phi, S_tilde)))


def top_count(n_pixels: int, p: float) -> int:
    return max(1, math.ceil(p * n_pixels - 1e-9))


def topk_membership(values: np.ndarray, p: float) -> np.ndarray:
    """Boolean (K, P) membership of each pixel in each channel's top-p set.

    Ties are broken by ascending pixel index.
    """
    K, P = values.shape
    m = top_count(P, p)
    member = np.zeros((K, P), dtype=bool)
    for k in range(K):
        order = np.argsort(-values[k], kind="stable")
        member[k, order[:m]] = True
    return member


def loss_topk_overlap(C, p: float = 0.05):
    """Top-p overlap penalty.

    The value is the exact overlap count normalised by ``p |X|`` (averaged over
    the batch). Set membership is held fixed within a step; the gradient comes
    from the mean of the non-dominant concentrations on overlapping pixels.
    Returns ``(loss, n_overlap_pixels)``.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    C = as_nchw_tensor(C)
    n, K, h, w = C.shape
    P = h * w
    denom = max(p * P, 1.0)
    vals = C.data.reshape(n, K, P)
    weights = np.zeros_like(vals)
    value, n_over = 0.0, 0
    for i in range(n):
        member = topk_membership(vals[i], p)
        over = np.maximum(member.sum(axis=0) - 1, 0)
        value += over.sum() / denom
        hit = over > 0
        n_over += int(hit.sum())
        if not hit.any():
            continue
        masked = np.where(member, vals[i], -np.inf)
        dominant = np.argmax(masked, axis=0)
        penal = member & hit[None, :]
        penal[dominant, np.arange(P)] = False
        weights[i] = penal / max(int(penal.sum()), 1)
    value /= n
    surrogate = ad.sum(ad.mul(C, ad.Tensor(weights.reshape(C.shape) / n)))
    exact = ad.add(surrogate, ad.Tensor(np.asarray(value - surrogate.data, dtype=C.dtype)))
    return exact, n_over


def loss_mask_dominance(C, mask, c_star: int, eps: float = MASK_EPS):
    """Mean of ``1 - C[c*] / (sum_k C_k + eps)`` over masked pixels.

    ``mask`` is (H, W) or (N, H, W). Returns ``(loss, n_masked)``.
    """
    C = as_nchw_tensor(C)
    n, K, h, w = C.shape
    if not 0 <= c_star < K:
        raise IndexError(f"c_star {c_star} out of range for K={K}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (n, h, w))
    if mask.shape != (n, h, w):
        raise ad.ShapeError("loss_mask_dominance", mask.shape, (n, h, w))
    s = ad.sum(C, axis=1, keepdims=True)
    ratio = ad.div(ad.take(C, c_star, axis=1), ad.add(s, eps))
    return ad.masked_mean(ad.sub(1.0, ratio), mask[:, None]), int(mask.sum())


def loss_total(rec_l1, rec_perceptual, ent, col, ov, mask, weights: LossWeights,
               counts: Dict[str, int] | None = None):
    """Weighted objective and a report of the unweighted terms."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    terms = [rec_l1, rec_perceptual, ent, col, ov, mask]
    coefs = [1.0, weights.perceptual_weight, weights.lambda_ent, weights.lambda_col,
             weights.lambda_ov, weights.lambda_mask]
    dtype = next((t.dtype for t in terms if isinstance(t, ad.Tensor)), np.float64)
    total = None
    for t, c in zip(terms, coefs):
        t = t if isinstance(t, ad.Tensor) else ad.Tensor(np.asarray(t, dtype=dtype))
        part = ad.mul(t, c)
        total = part if total is None else ad.add(total, part)
    vals = [float(t.item()) if isinstance(t, ad.Tensor) else float(t) for t in terms]
    counts = counts or {}
    report = LossReport(*vals, total=float(total.item()),
                        n_tau=counts.get("n_tau", 0), n_mask=counts.get("n_mask", 0),
                        n_overlap=counts.get("n_overlap", 0))
    return total, report
