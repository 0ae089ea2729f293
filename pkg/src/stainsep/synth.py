"""Synthetic multiplex IHC scenes with known stains and concentrations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .stains import ConcentrationMap, StainMatrix, normalize_columns, STAIN_NAMES, INITIAL_STAINS


def _per_stain(value, K: int, name: str) -> list:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        return [tuple(arr)] * K
    if arr.shape[0] != K:
        raise ValueError(f"{name}: expected one range per stain ({K}), got {arr.shape[0]}")
    return [tuple(r) for r in arr]


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene.

    Blob statistics are ``(low, high)`` ranges, either shared or one per stain.
    ``costain`` entries ``(i, j, prob)`` copy each blob of stain i into stain j
    with probability ``prob``. ``background`` is a uniform concentration added
    to channel ``background_channel`` everywhere.
    """

    stains: StainMatrix = field(default_factory=lambda: normalize_columns(StainMatrix.initial_panel()))
    height: int = 96
    width: int = 96
    blob_count: Sequence = (2, 5)
    blob_radius: Sequence = (2.0, 6.0)
    blob_peak: Sequence = (0.4, 1.2)
    costain: Sequence = ((0, 1, 0.3),)
    background: float = 0.0
    background_channel: int = 0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.stains, StainMatrix):
            self.stains = StainMatrix(self.stains)
        K = self.stains.K
        self._counts = _per_stain(self.blob_count, K, "blob_count")
        self._radii = _per_stain(self.blob_radius, K, "blob_radius")
        self._peaks = _per_stain(self.blob_peak, K, "blob_peak")
        for lo, hi in self._radii:
            if lo < 1 or hi < lo:
                raise ValueError("blob radii must satisfy 1 <= low <= high")
        for lo, hi in self._counts:
            if lo < 0 or hi < lo:
                raise ValueError("blob counts must satisfy 0 <= low <= high")
        self.costain = tuple((int(i), int(j), float(p)) for i, j, p in self.costain)
        for i, j, p in self.costain:
            if not (0 <= i < K and 0 <= j < K) or i == j:
                raise ValueError(f"invalid co-stain pair ({i}, {j})")
            if not 0.0 <= p <= 1.0:
                raise ValueError("co-stain probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.background < 0:
            raise ValueError("noise_sigma and background must be nonnegative")

    @property
    def K(self) -> int:
        return self.stains.K


def _blob(h: int, w: int, cy: float, cx: float, radius: float, peak: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return peak * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))


def generate_scene(spec: SceneSpec, seed: int | None = None):
    """Return ``(rgb, C_true, S_true)`` for one scene.

    ``rgb = clip(exp(-S C) + noise, 0, 1)``; deterministic given the seed.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    K, h, w = spec.K, spec.height, spec.width
    C = np.zeros((h, w, K))
    for k in range(K):
        lo, hi = spec._counts[k]
        n = int(rng.integers(int(lo), int(hi) + 1))
        for _ in range(n):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(*spec._radii[k])
            peak = rng.uniform(*spec._peaks[k])
            blob = _blob(h, w, cy, cx, r, peak)
            C[..., k] += blob
            for i, j, p in spec.costain:
                if i == k and rng.uniform() < p:
                    C[..., j] += blob
    if spec.background:
        C[..., spec.background_channel] += spec.background
    clean = np.exp(-(C @ spec.stains.columns.T))
    if spec.noise_sigma > 0:
        rgb = np.clip(clean + rng.normal(0.0, spec.noise_sigma, clean.shape), 0.0, 1.0)
    else:
        rgb = clean
    return rgb, ConcentrationMap(C, spec.stains.names), spec.stains


def generate_corpus(spec: SceneSpec, count: int, seed: int | None = None):
    """``count`` scenes from independent child seeds of one root seed."""
    root = np.random.SeedSequence(spec.seed if seed is None else seed)
    return [generate_scene(spec, int(child.generate_state(1)[0]))
            for child in root.spawn(count)]


def perturb_stains(S: StainMatrix, max_degrees: float, seed: int = 0,
                   min_degrees: float = 0.0) -> StainMatrix:
    """Rotate each column by an angle in [min, max] degrees in a random direction,
    staying in the nonnegative orthant."""
    rng = np.random.default_rng(seed)
    cols = normalize_columns(S).columns
    out = np.empty_like(cols)
    for k in range(cols.shape[1]):
        s = cols[:, k]
        for _ in range(1000):
            d = rng.standard_normal(3)
            d -= d.dot(s) * s
            d /= np.linalg.norm(d)
            theta = np.radians(rng.uniform(min_degrees, max_degrees))
            v = np.cos(theta) * s + np.sin(theta) * d
            if np.all(v >= 0):
                out[:, k] = v
                break
        else:
            raise RuntimeError(f"could not perturb column {k} inside the nonnegative orthant")
    return StainMatrix(out, S.names)


@dataclass
class RecoveryReport:
    correlations: np.ndarray
    scales: np.ndarray
    relative_errors: np.ndarray
    angular_errors: np.ndarray | None
    permutation: np.ndarray

    @property
    def mean_correlation(self) -> float:
        return float(np.mean(self.correlations))

    @property
    def max_angular_error(self) -> float:
        return float(np.max(self.angular_errors)) if self.angular_errors is not None else float("nan")


def _cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        M = (A.T @ B) / np.outer(na, nb)
    return np.nan_to_num(M)


def match_columns(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` maximising total cosine, ``est[:, perm[k]] ~ ref[:, k]``."""
    rows, cols = linear_sum_assignment(-_cosine_matrix(est, ref))
    perm = np.empty(ref.shape[1], dtype=int)
    perm[cols] = rows
    return perm


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))


def recovery_score(C_est, C_true, S_est=None, S_true=None) -> RecoveryReport:
    """Scale-free recovery of concentrations and stain vectors.

    Channels are matched to the truth by maximal stain-vector cosine when both
    matrices are given, otherwise by concentration cosine. Each matched channel
    gets the least-squares scale ``a_k`` before comparison.
    """
    ce = np.asarray(getattr(C_est, "values", C_est), dtype=float)
    ct = np.asarray(getattr(C_true, "values", C_true), dtype=float)
    K = ct.shape[-1]
    if ce.shape[-1] != K:
        raise ValueError(f"K mismatch: estimate has {ce.shape[-1]}, truth has {K}")
    ce, ct = ce.reshape(-1, K), ct.reshape(-1, K)
    se = None if S_est is None else np.asarray(getattr(S_est, "columns", S_est), float)
    st = None if S_true is None else np.asarray(getattr(S_true, "columns", S_true), float)
    if se is not None and st is not None:
        if se.shape != st.shape:
            raise ValueError(f"K mismatch: {se.shape} vs {st.shape}")
        perm = match_columns(se, st)
    else:
        perm = match_columns(ce, ct)
    corrs, scales, rel = np.zeros(K), np.zeros(K), np.zeros(K)
    for k in range(K):
        e, t = ce[:, perm[k]], ct[:, k]
        ee = float(e @ e)
        a = float(e @ t) / ee if ee > 0 else 0.0
        scales[k] = a
        corrs[k] = _corr(a * e, t)
        nt = np.linalg.norm(t)
        rel[k] = np.linalg.norm(a * e - t) / nt if nt > 0 else np.linalg.norm(a * e)
    angles = None
    if se is not None and st is not None:
        cos = np.clip(_cosine_matrix(se[:, perm], st).diagonal(), -1.0, 1.0)
        angles = np.degrees(np.arccos(cos))
    return RecoveryReport(corrs, scales, rel, angles, perm)


def brute_force_match(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exhaustive version of :func:`match_columns` (small K only)."""
    M = _cosine_matrix(est, ref)
    K = ref.shape[1]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(K)):
        score = sum(M[perm[k], k] for k in range(K))
        if score > best:
            best, best_perm = score, perm
    return np.array(best_perm)


def default_panel_spec(**overrides) -> SceneSpec:
    """Five-stain scene spec on the colorectal panel stain vectors."""
    kw = dict(stains=normalize_columns(StainMatrix(INITIAL_STAINS, STAIN_NAMES)))
    kw.update(overrides)
    return SceneSpec(**kw)
