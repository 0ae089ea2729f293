"""Desk-scale synthetic experiments: stain recovery and mask steering.

Both run the full training loop on generated scenes with known ground truth.
The acceptance suite and the demos share these definitions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .baseline import nnls_unmix
from .encoder import EncoderConfig
from .io import checkpoint_to_bytes
from .losses import LossReport, LossWeights
from .metrics import channel_crossover, mean_offdiagonal
from .stains import INITIAL_STAINS, STAIN_NAMES, StainMatrix, angle_between, normalize_columns
from .synth import SceneSpec, default_panel_spec, generate_corpus, match_columns, perturb_stains
from .trainer import HueMaskSpec, TrainConfig, TrainResult, make_hue_mask, separate, train


def thread_limit(n: int):
    """Cap BLAS threads; a single thread makes float sums bit-reproducible."""
    return threadpool_limits(limits=n)


def true_panel() -> StainMatrix:
    return normalize_columns(StainMatrix(INITIAL_STAINS, STAIN_NAMES))


# ------------------------------------------------------------------ recovery

@dataclass
class RecoveryExperiment:
    """Train on scenes drawn from the true panel, starting from a rotated copy.

    The trainer sees only the perturbed columns, as its colour anchor.
    """

    scenes: int = 200
    size: int = 96
    eval_scenes: int = 40
    corpus_seed: int = 0
    perturb_seed: int = 1
    min_degrees: float = 5.0
    max_degrees: float = 10.0
    seed: int = 0
    threads: int = 1
    steps: int = 2000
    crop: int = 64
    batch_size: int = 4
    base_channels: int = 8
    warm_start_steps: int = 800
    warm_start_lr: float = 2e-3
    lr: float = 5e-4
    stain_lr: float = 2e-3
    sparsity_warmup: int = 800
    weights: LossWeights = field(default_factory=lambda: LossWeights(
        lambda_ent=0.02, lambda_col=0.02, lambda_ov=0.0, lambda_mask=0.0))

    def scene_spec(self) -> SceneSpec:
        return default_panel_spec(height=self.size, width=self.size)

    def initial_stains(self) -> StainMatrix:
        return perturb_stains(true_panel(), self.max_degrees, self.perturb_seed, self.min_degrees)

    def train_config(self) -> TrainConfig:
        S0 = self.initial_stains()
        return TrainConfig(
            steps=self.steps, crop=self.crop, batch_size=self.batch_size, seed=self.seed,
            lr=self.lr, stain_lr=self.stain_lr, weights=self.weights,
            warm_start_steps=self.warm_start_steps, warm_start_lr=self.warm_start_lr,
            sparsity_warmup=self.sparsity_warmup, stain_names=list(S0.names),
            stain_columns=S0.columns.T.tolist(),
            encoder=EncoderConfig(K=S0.K, base_channels=self.base_channels))


@dataclass
class RecoveryResult:
    training: TrainResult
    angles: list
    permutation_to_initial: list
    recon_l1: float
    model_crossover: float
    nnls_crossover: float
    true_crossover: float
    seconds: float

    @property
    def checkpoint_bytes(self) -> bytes:
        return checkpoint_to_bytes(self.training.checkpoint)

    @property
    def loss_csv(self) -> str:
        return self.training.csv()


def costain_free_pairs(spec: SceneSpec) -> list:
    linked = {tuple(sorted((i, j))) for i, j, _ in spec.costain}
    K = spec.K
    return [(i, j) for i in range(K) for j in range(i + 1, K) if (i, j) not in linked]


def run_recovery_experiment(exp: RecoveryExperiment,
                            callback: Callable[[int, LossReport], None] | None = None) -> RecoveryResult:
    spec = exp.scene_spec()
    corpus = generate_corpus(spec, exp.scenes, exp.corpus_seed)
    S_true, S0 = spec.stains, exp.initial_stains()
    start = time.perf_counter()
    with thread_limit(exp.threads):
        result = train(exp.train_config(), [x for x, _, _ in corpus], callback=callback)
        seconds = time.perf_counter() - start
        S = result.stains
        perm = match_columns(S.columns, S_true.columns)
        angles = [angle_between(S.columns[:, perm[k]], S_true.columns[:, k]) for k in range(S.K)]
        pairs = costain_free_pairs(spec)
        l1, model_x, nnls_x, true_x = [], [], [], []
        for x, C_true, _ in corpus[:exp.eval_scenes]:
            C = separate(result.checkpoint, x).values.astype(np.float64)
            xhat = np.exp(-C @ S.columns.T)
            l1.append(np.mean(np.abs(xhat - x)))
            model_x.append(mean_offdiagonal(channel_crossover(C), pairs))
            nnls_x.append(mean_offdiagonal(channel_crossover(nnls_unmix(S0, x).values), pairs))
            true_x.append(mean_offdiagonal(channel_crossover(C_true.values), pairs))
    return RecoveryResult(result, angles, match_columns(S.columns, S0.columns).tolist(),
                          float(np.mean(l1)), float(np.mean(model_x)), float(np.mean(nnls_x)),
                          float(np.mean(true_x)), seconds)


# ---------------------------------------------------------------- mask loss

@dataclass
class MaskExperiment:
    """A rare, intense stain plus a hue mask that designates its channel."""

    channel: str = "CD8"
    lambda_mask: float = 0.5
    scenes: int = 60
    size: int = 64
    corpus_seed: int = 3
    seed: int = 0
    threads: int = 1
    steps: int = 600
    crop: int = 64
    batch_size: int = 4
    base_channels: int = 8
    warm_start_steps: int = 200
    sparsity_warmup: int = 200
    lr: float = 2e-3
    mask_amount: float = 2.0
    weights: LossWeights = field(default_factory=lambda: LossWeights(
        lambda_ent=0.02, lambda_col=0.005, lambda_ov=0.0))

    def scene_spec(self) -> SceneSpec:
        K = len(STAIN_NAMES)
        c = STAIN_NAMES.index(self.channel)
        counts = [(2, 5)] * K
        peaks = [(0.4, 1.2)] * K
        counts[c] = (0, 1)
        peaks[c] = (1.5, 2.5)
        return default_panel_spec(height=self.size, width=self.size,
                                  blob_count=counts, blob_peak=peaks)

    def without_mask(self) -> "MaskExperiment":
        return replace(self, lambda_mask=0.0)

    def train_config(self) -> TrainConfig:
        S = true_panel()
        hue = HueMaskSpec.for_stain(S, self.channel, self.mask_amount)
        return TrainConfig(
            steps=self.steps, crop=self.crop, batch_size=self.batch_size, seed=self.seed, lr=self.lr,
            warm_start_steps=self.warm_start_steps, sparsity_warmup=self.sparsity_warmup,
            weights=replace(self.weights, lambda_mask=self.lambda_mask), hue_masks=[hue],
            encoder=EncoderConfig(K=S.K, base_channels=self.base_channels))


@dataclass
class MaskResult:
    training: TrainResult
    dominance: float
    masked_pixels: int


def run_mask_experiment(exp: MaskExperiment) -> MaskResult:
    """Mean ``C[c*] / sum C`` over hue-masked pixels of the training scenes."""
    corpus = generate_corpus(exp.scene_spec(), exp.scenes, exp.corpus_seed)
    cfg = exp.train_config()
    c = cfg.stain_names.index(exp.channel)
    with thread_limit(exp.threads):
        result = train(cfg, [x for x, _, _ in corpus])
        ratios = []
        for x, _, _ in corpus:
            M = make_hue_mask(x, cfg.hue_masks[0])
            if not M.any():
                continue
            C = separate(result.checkpoint, x).values.astype(np.float64)[M]
            ratios.append(C[:, c] / (C.sum(axis=1) + 1e-8))
    ratios = np.concatenate(ratios) if ratios else np.zeros(0)
    return MaskResult(result, float(ratios.mean()) if ratios.size else float("nan"), int(ratios.size))
