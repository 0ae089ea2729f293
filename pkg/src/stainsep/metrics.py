"""Separation and reconstruction quality metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 100.0


def channel_crossover(C) -> np.ndarray:
    """K x K cosine similarity between flattened concentration channels.

    A channel that is identically zero has similarity 0 with everything,
    itself included.
    """
    c = np.asarray(getattr(C, "values", C), dtype=np.float64)
    flat = c.reshape(-1, c.shape[-1])
    norms = np.linalg.norm(flat, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    M = (flat.T @ flat) / np.outer(safe, safe)
    M[norms == 0, :] = 0.0
    M[:, norms == 0] = 0.0
    return np.clip(M, -1.0, 1.0)


def psnr(xhat: np.ndarray, x: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(xhat, float) - np.asarray(x, float)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def ssim(xhat: np.ndarray, x: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels."""
    return float(structural_similarity(
        np.asarray(xhat, float), np.asarray(x, float), data_range=1.0, channel_axis=-1,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03))


def reconstruction_metrics(xhat: np.ndarray, x: np.ndarray) -> dict:
    xhat, x = np.asarray(xhat, float), np.asarray(x, float)
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch {xhat.shape} vs {x.shape}")
    return {"mean_l1": float(np.mean(np.abs(xhat - x))),
            "psnr": psnr(xhat, x),
            "ssim": ssim(xhat, x)}


@dataclass
class CorpusCrossover:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def to_csv(self, names: Sequence[str]) -> str:
        buf = io.StringIO()
        buf.write("stat,stain," + ",".join(names) + "\n")
        for label, M in (("mean", self.mean), ("std", self.std)):
            for name, row in zip(names, M):
                buf.write(f"{label},{name}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def mean_crossover_over_corpus(maps: Iterable) -> CorpusCrossover:
    mats = [channel_crossover(m) for m in maps]
    if not mats:
        raise ValueError("empty corpus")
    stack = np.stack(mats)
    return CorpusCrossover(stack.mean(axis=0), stack.std(axis=0), len(mats))


def crossover_csv(M: np.ndarray, names: Sequence[str]) -> str:
    lines = ["stain," + ",".join(names)]
    for name, row in zip(names, M):
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def mean_offdiagonal(M: np.ndarray, pairs: Iterable[tuple[int, int]] | None = None) -> float:
    """Mean of the selected (or all) upper off-diagonal entries."""
    K = M.shape[0]
    if pairs is None:
        pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
    pairs = list(pairs)
    return float(np.mean([M[i, j] for i, j in pairs]))
