"""Matrix-based colour deconvolution baselines (pseudo-inverse and NNLS)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stains import ConcentrationMap, StainMatrix, rgb_to_od, DEFAULT_OD_EPS


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class UnmixResult:
    """Per-pixel unmixing output.

    ``unclamped`` holds pseudo-inverse values before negatives are zeroed;
    ``converged`` is False for NNLS pixels that hit ``max_iter``.
    """

    concentrations: ConcentrationMap
    residual: np.ndarray
    converged: np.ndarray
    unclamped: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return self.concentrations.values


def _as_stains(S) -> StainMatrix:
    return S if isinstance(S, StainMatrix) else StainMatrix(S)


def _residual(cols: np.ndarray, c: np.ndarray, od: np.ndarray) -> np.ndarray:
    r = c @ cols.T - od
    return np.einsum("...i,...i->...", r, r)


def pinv_unmix(S, x: np.ndarray, eps: float = DEFAULT_OD_EPS,
               rcond: float = 1e10) -> UnmixResult:
    """Least-squares unmixing ``c = pinv(S) od(x)`` with negatives clamped to 0.

    Raises RankDeficientError when S does not have full column rank
    (condition number above ``rcond``).
    """
    S = _as_stains(S)
    sv = np.linalg.svd(S.columns, compute_uv=False)
    cond = np.inf if sv[-1] == 0 or S.K > 3 else sv[0] / sv[-1]
    if S.K > 3 or cond > rcond:
        raise RankDeficientError(
            f"stain matrix 3x{S.K} is rank deficient (condition number {cond:.3g})")
    od = rgb_to_od(x, eps)
    raw = od @ np.linalg.pinv(S.columns).T
    c = np.maximum(raw, 0.0)
    return UnmixResult(ConcentrationMap(c, S.names), _residual(S.columns, c, od),
                       np.ones(od.shape[:-1], dtype=bool), raw)


def nnls_batch(A: np.ndarray, B: np.ndarray, max_iter: int | None = None,
               tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Lawson-Hanson active-set NNLS for many right-hand sides at once.

    Solves ``min ||A x - b||, x >= 0`` for each row ``b`` of ``B`` (N x m),
    with ``A`` of shape m x K. Returns (X, converged) with X of shape N x K.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    n, K = B.shape[0], A.shape[1]
    max_iter = 3 * K if max_iter is None else max_iter
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    X = np.zeros((n, K))
    P = np.zeros((n, K), dtype=bool)
    AtB = B @ A
    AtA = A.T @ A
    done = np.zeros(n, dtype=bool)

    def solve_passive(idx, passive):
        masked = A[None, :, :] * passive[:, None, :]
        z = np.einsum("nkm,nm->nk", np.linalg.pinv(masked), B[idx])
        return np.where(passive, z, 0.0)

    for _ in range(max_iter):
        W = AtB - X @ AtA
        cand = np.where(~P, W, -np.inf)
        j = np.argmax(cand, axis=1)
        best = cand[np.arange(n), j]
        done |= best <= tol
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        P[idx, j[idx]] = True
        x_act, p_act = X[idx], P[idx]
        z = solve_passive(idx, p_act)
        for _inner in range(3 * K):
            bad = p_act & (z <= 0)
            rows = bad.any(axis=1)
            if not rows.any():
                break
            xr, zr, br = x_act[rows], z[rows], bad[rows]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(br, xr / (xr - zr), np.inf)
            alpha = np.min(ratio, axis=1, keepdims=True)
            xr = xr + alpha * (zr - xr)
            pr = p_act[rows] & (xr > 1e-14)
            xr = np.where(pr, xr, 0.0)
            x_act[rows], p_act[rows] = xr, pr
            z[rows] = solve_passive(idx[rows], pr)
        X[idx], P[idx] = np.maximum(z, 0.0), p_act
    else:
        W = AtB - X @ AtA
        done |= ~np.any(~P & (W > tol), axis=1)
    return X, done


def nnls_unmix(S, x: np.ndarray, max_iter: int | None = None, tol: float = 1e-8,
               eps: float = DEFAULT_OD_EPS) -> UnmixResult:
    """Per-pixel nonnegative least squares on optical density.

    Pixels are independent; results do not depend on how the image is split.
    """
    S = _as_stains(S)
    x = np.asarray(x, dtype=np.float64)
    od = rgb_to_od(x, eps)
    flat = od.reshape(-1, 3)
    c, converged = nnls_batch(S.columns, flat, max_iter, tol)
    c = c.reshape(od.shape[:-1] + (S.K,))
    return UnmixResult(ConcentrationMap(c, S.names), _residual(S.columns, c, od),
                       converged.reshape(od.shape[:-1]))
