"""Unsupervised training of the encoder and the learnable stain basis."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from skimage.color import rgb2hsv
from skimage.filters import threshold_otsu

from . import autodiff as ad
from .encoder import EncoderConfig, EncoderParams, build_encoder, forward, encode
from .baseline import nnls_unmix
from .io import Checkpoint, read_image, write_checkpoint
from .losses import (FeatureExtractor, LossReport, LossWeights, CSV_HEADER,
                     loss_color, loss_entropy, loss_mask_dominance, loss_reconstruction,
                     loss_topk_overlap, loss_total)
from .stains import (ConcentrationMap, StainMatrix, normalize_columns, decode_tensor,
                     stain_tensor_normalized, hwc_to_nchw, INITIAL_STAINS, STAIN_NAMES)

log = logging.getLogger(__name__)

BACKGROUND_LUMINOSITY = 0.8
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, batch: np.ndarray, report: LossReport, dump: Path | None):
        self.step, self.batch, self.report, self.dump = step, batch, report, dump
        where = f"; batch saved to {dump}" if dump else ""
        super().__init__(f"non-finite loss at step {step}: {report}{where}")


# ------------------------------------------------------------------ hue masks

@dataclass
class HueMaskSpec:
    """Hue/saturation/OD thresholds flagging candidate pixels of one stain."""

    channel: str
    hue_center: float
    hue_tolerance: float = 15.0
    min_saturation: float = 0.15
    min_od: float = 0.5

    def __post_init__(self):
        if not 0 < self.hue_tolerance <= 180:
            raise ConfigError("hue_tolerance must lie in (0, 180]")

    @classmethod
    def for_stain(cls, S: StainMatrix, name: str, amount: float = 2.0, **kw) -> "HueMaskSpec":
        """Centre the hue window on the colour of ``amount`` units of stain ``name``."""
        s = normalize_columns(S).columns[:, S.index(name)]
        return cls(name, rgb_hue(np.exp(-amount * s)), **kw)


def rgb_hue(rgb) -> float:
    """HSV hue of one RGB colour, in degrees."""
    return float(rgb2hsv(np.asarray(rgb, float).reshape(1, 1, 3))[0, 0, 0] * 360.0)


def make_hue_mask(x: np.ndarray, spec: HueMaskSpec) -> np.ndarray:
    """Boolean H x W mask of pixels inside the hue window of ``spec``."""
    x = np.asarray(x, dtype=np.float64)
    hsv = rgb2hsv(x)
    diff = np.abs(hsv[..., 0] * 360.0 - spec.hue_center) % 360.0
    diff = np.minimum(diff, 360.0 - diff)
    od = -np.log(x + 1e-6)
    od_mag = np.linalg.norm(np.maximum(od, 0.0), axis=-1)
    return (diff <= spec.hue_tolerance) & (hsv[..., 1] >= spec.min_saturation) & (od_mag >= spec.min_od)


# ------------------------------------------------------------- stain params

def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20, y, np.log(np.expm1(np.minimum(y, 20))))


def init_stain_matrix(source, floor: float = 1e-4) -> np.ndarray:
    """Unconstrained stain parameters ``u`` with ``softplus(u)`` equal to the source.

    ``source`` is a StainMatrix or a 3 x K array of OD vectors; entries below
    ``floor`` are raised to it first.
    """
    cols = np.asarray(getattr(source, "columns", source), dtype=np.float64)
    return inverse_softplus(np.maximum(cols, floor))


def stains_from_swatches(rgb, names=()) -> StainMatrix:
    """OD stain vectors from K pure-stain RGB colours (K x 3, values in (0, 1])."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 1e-6, 1.0)
    return normalize_columns(StainMatrix(-np.log(rgb).T, tuple(names)))


def stains_from_params(u: np.ndarray, names=()) -> StainMatrix:
    y = np.logaddexp(0.0, np.asarray(u, dtype=np.float64))
    return normalize_columns(StainMatrix(y, tuple(names)))


# ---------------------------------------------------------------- ingestion

@dataclass
class PatchIndex:
    paths: List[Path]
    tissue_fractions: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, i: int) -> np.ndarray:
        return read_image(self.paths[i])

    def to_text(self) -> str:
        return "".join(json.dumps({"path": str(p), "tissue_fraction": f}) + "\n"
                       for p, f in zip(self.paths, self.tissue_fractions))

    @classmethod
    def from_text(cls, text: str, base: Path | None = None) -> "PatchIndex":
        paths, fracs = [], []
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                p = Path(rec["path"])
                paths.append(p if p.is_absolute() or base is None else base / p)
                fracs.append(float(rec["tissue_fraction"]))
        return cls(paths, fracs)


def tissue_fraction(x: np.ndarray) -> float:
    """Fraction of pixels at or below the Otsu threshold of luminosity (mean RGB).

    Constant images are classified against a fixed background luminosity.
    """
    lum = np.asarray(x, dtype=np.float64).mean(axis=-1)
    if np.ptp(lum) == 0:
        return float(np.mean(lum < BACKGROUND_LUMINOSITY))
    # exact histogram over the distinct levels, so the threshold is a data value
    levels, counts = np.unique(lum, return_counts=True)
    return float(np.mean(lum <= threshold_otsu(hist=(counts, levels))))


def ingest_patches(directory, method: str = "otsu", min_tissue: float = 0.5) -> PatchIndex:
    if method != "otsu":
        raise ValueError(f"unknown tissue threshold method {method!r}")
    directory = Path(directory)
    paths, fracs = [], []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            x = read_image(path)
        except Exception as exc:  # noqa: BLE001 - any decoder failure skips the file
            warnings.warn(f"skipping unreadable image {path}: {exc}")
            continue
        frac = tissue_fraction(x)
        if frac >= min_tissue:
            paths.append(path)
            fracs.append(frac)
    if not paths:
        raise ValueError(f"no tissue patches found in {directory}")
    return PatchIndex(paths, fracs)


# ------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    crop: int = 128
    lr: float = 1e-3
    stain_lr: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 1e-2
    p: float = 0.05
    od_eps: float = 1e-6
    entropy_eps: float = 1e-8
    mask_eps: float = 1e-8
    hue_masks: List[HueMaskSpec] = field(default_factory=list)
    stain_names: List[str] = field(default_factory=lambda: list(STAIN_NAMES))
    stain_columns: Optional[List[List[float]]] = None
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(K=5))
    perceptual: bool = True
    extractor_seed: int = 0
    sparsity_warmup: int = 0
    warm_start_steps: int = 0
    warm_start_lr: Optional[float] = None
    checkpoint_every: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = _strict(LossWeights, self.weights, "weights")
        if isinstance(self.encoder, dict):
            self.encoder = _strict(EncoderConfig, self.encoder, "encoder")
        self.hue_masks = [_strict(HueMaskSpec, m, "hue_masks") if isinstance(m, dict) else m
                          for m in self.hue_masks]
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.crop <= 0 or self.crop % 4:
            raise ConfigError("crop must be a positive multiple of 4")
        if self.sparsity_warmup < 0:
            raise ConfigError("sparsity_warmup must be >= 0")
        if self.warm_start_steps < 0:
            raise ConfigError("warm_start_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.encoder.K != len(self.stain_names):
            raise ConfigError(f"encoder K={self.encoder.K} but {len(self.stain_names)} stain names")
        for m in self.hue_masks:
            if m.channel not in self.stain_names:
                raise ConfigError(f"hue mask channel {m.channel!r} is not a stain name")

    def initial_stains(self) -> StainMatrix:
        if self.stain_columns is None:
            if tuple(self.stain_names) != STAIN_NAMES:
                raise ConfigError("stain_columns are required for a custom stain panel")
            cols = INITIAL_STAINS
        else:
            cols = np.asarray(self.stain_columns, dtype=np.float64).T
        return normalize_columns(StainMatrix(cols, tuple(self.stain_names)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _strict(cls, d, "config")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc)


def _strict(kind, d: dict, where: str):
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return kind(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lrs: dict | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lrs = lrs or {}
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.lrs.get(name, self.lr)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for key, arr in state.items():
            if key.startswith("m."):
                self.m[key[2:]] = arr.copy()
            elif key.startswith("v."):
                self.v[key[2:]] = arr.copy()


# ---------------------------------------------------------------- objective

@dataclass
class Objective:
    total: ad.Tensor
    report: LossReport
    concentrations: ad.Tensor
    reconstruction: ad.Tensor
    stains: ad.Tensor


def sparsity_scale(cfg: TrainConfig, step: int) -> float:
    """Linear ramp of the entropy and overlap weights over ``sparsity_warmup`` steps,
    starting once the warm start has finished."""
    if cfg.sparsity_warmup <= 0:
        return 1.0
    return min(1.0, max(0.0, step - cfg.warm_start_steps) / cfg.sparsity_warmup)


def objective(cfg: TrainConfig, params: dict, u: ad.Tensor, X: np.ndarray,
              S_tilde: StainMatrix, extractor: FeatureExtractor | None,
              masks: Sequence[tuple[int, np.ndarray]] = (), step: int | None = None) -> Objective:
    """Forward pass and weighted loss for an (N, H, W, 3) batch.

    ``step`` enables the sparsity warm-up; None means fully ramped.
    """
    x = ad.Tensor(hwc_to_nchw(X).astype(u.dtype))
    S = stain_tensor_normalized(ad.softplus(u))
    C = forward(cfg.encoder, params, x)
    xhat = decode_tensor(S, C)
    w = cfg.weights
    if step is not None and cfg.sparsity_warmup:
        r = sparsity_scale(cfg, step)
        w = replace(w, lambda_ent=w.lambda_ent * r, lambda_ov=w.lambda_ov * r)
    _, l1, perc = loss_reconstruction(xhat, x, extractor, w.perceptual_weight)
    ent, n_tau = loss_entropy(C, cfg.tau, cfg.entropy_eps)
    col = loss_color(S, S_tilde)
    ov, n_over = loss_topk_overlap(C, cfg.p)
    mask_terms, n_mask = [], 0
    for c_star, M in masks:
        term, n = loss_mask_dominance(C, M, c_star, cfg.mask_eps)
        mask_terms.append(term)
        n_mask += n
    if mask_terms:
        mask = mask_terms[0]
        for t in mask_terms[1:]:
            mask = ad.add(mask, t)
        mask = ad.mul(mask, 1.0 / len(mask_terms))
    else:
        mask = ad.Tensor(np.zeros((), dtype=u.dtype))
    total, report = loss_total(l1, perc, ent, col, ov, mask, w,
                               {"n_tau": n_tau, "n_mask": n_mask, "n_overlap": n_over})
    return Objective(total, report, C, xhat, S)


def warm_start_objective(obj: Objective, X: np.ndarray, S_tilde: StainMatrix,
                         eps: float = 1e-6) -> Objective:
    """Replace the training loss by the mean squared difference to NNLS(S_tilde, X).

    Squared error, not L1: an L1 fit to the sparse NNLS maps is minimised
    by an all-zero output.

    Gives every channel a live, roughly placed start before the sparsity
    terms act. The stain basis receives no gradient.
    """
    target = np.stack([nnls_unmix(S_tilde, x, eps=eps).values for x in X])
    T = ad.Tensor(hwc_to_nchw(target).astype(obj.concentrations.dtype))
    total = ad.mean(ad.square(ad.sub(obj.concentrations, T)))
    return replace(obj, total=total, report=replace(obj.report, total=total.item()))


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[LossReport]

    def csv(self) -> str:
        rows = [",".join(CSV_HEADER)]
        rows += [r.csv_row(i) for i, r in enumerate(self.history)]
        return "\n".join(rows) + "\n"

    @property
    def stains(self) -> StainMatrix:
        return stains_from_params(self.checkpoint.stain_params, self.checkpoint.stain_names)


def _as_images(patches) -> tuple[int, Callable[[int], np.ndarray]]:
    if isinstance(patches, PatchIndex):
        cache: dict = {}

        def load(i):
            if i not in cache:
                cache[i] = patches.load(i)
            return cache[i]
        return len(patches), load
    patches = list(patches)
    return len(patches), lambda i: np.asarray(patches[i], dtype=np.float64)


def random_crop(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w, _ = x.shape
    if h < size or w < size:
        pad = np.ones((max(h, size), max(w, size), 3))
        pad[:h, :w] = x
        x, h, w = pad, pad.shape[0], pad.shape[1]
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return x[i:i + size, j:j + size]


def batch_rng_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(1, step))


def make_checkpoint(cfg: TrainConfig, params: dict, u: np.ndarray, step: int,
                    optimizer: Adam | None) -> Checkpoint:
    return Checkpoint(cfg.encoder.to_dict(),
                      {k: np.asarray(v, dtype=np.float32).copy() for k, v in params.items()},
                      np.asarray(u, dtype=np.float32).copy(), tuple(cfg.stain_names), int(step),
                      optimizer.state() if optimizer is not None else None,
                      {"stain_init": cfg.initial_stains().columns.T.tolist()})


def train(cfg: TrainConfig, patches, resume: Checkpoint | None = None,
          callback: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps over random crops of ``patches``.

    Deterministic for a fixed seed in single-threaded mode.
    """
    n_patches, load = _as_images(patches)
    if n_patches == 0:
        raise ValueError("empty patch index")
    init_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    S_tilde = cfg.initial_stains()
    names = list(cfg.stain_names)
    mask_specs = [(names.index(m.channel), m) for m in cfg.hue_masks]
    extractor = FeatureExtractor.default(cfg.extractor_seed) if cfg.perceptual else None

    if resume is None:
        enc = build_encoder(cfg.encoder, int(init_seq.generate_state(1)[0]))
        raw = enc.tensors
        u0 = init_stain_matrix(S_tilde).astype(np.float32)
        start = 0
    else:
        raw, u0, start = resume.params, resume.stain_params, resume.step
    params = {k: ad.Tensor(v.astype(np.float32), requires_grad=True) for k, v in raw.items()}
    u = ad.Tensor(np.asarray(u0, dtype=np.float32), requires_grad=True)
    lrs = {"stain.u": cfg.stain_lr} if cfg.stain_lr is not None else {}
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, lrs)
    if resume is not None and resume.optimizer:
        opt.load_state(resume.optimizer)
    trainable = dict(params, **{"stain.u": u})
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    history = []

    for step in range(start, cfg.steps):
        # one stream per step, so a resumed run draws the same crops
        rng = np.random.default_rng(batch_rng_seed(cfg.seed, step))
        idx = rng.integers(0, n_patches, size=cfg.batch_size)
        X = np.stack([random_crop(load(int(i)), cfg.crop, rng) for i in idx])
        masks = [(c, np.stack([make_hue_mask(xc, spec) for xc in X])) for c, spec in mask_specs]
        opt.lr = cfg.warm_start_lr if step < cfg.warm_start_steps and cfg.warm_start_lr else cfg.lr
        obj = objective(cfg, params, u, X, S_tilde, extractor, masks, step)
        if step < cfg.warm_start_steps:
            obj = warm_start_objective(obj, X, S_tilde, cfg.od_eps)
        if not np.isfinite(obj.report.total):
            dump = None
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                dump = out_dir / f"nonfinite_step{step}.npz"
                np.savez(dump, batch=X)
            raise NonFiniteLossError(step, X, obj.report, dump)
        for p in trainable.values():
            p.grad = None
        obj.total.backward()
        opt.step(trainable)
        history.append(obj.report)
        if callback is not None:
            callback(step, obj.report)
        if cfg.checkpoint_every and out_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_checkpoint(out_dir / f"step{step + 1:06d}.sqck",
                             make_checkpoint(cfg, {k: p.data for k, p in params.items()},
                                             u.data, step + 1, opt))
        if step % 100 == 0:
            log.debug("step %d total %.5f rec %.5f", step, obj.report.total, obj.report.rec_l1)

    ck = make_checkpoint(cfg, {k: p.data for k, p in params.items()}, u.data,
                         max(cfg.steps, start), opt if opt.t else None)
    return TrainResult(ck, history)


# ----------------------------------------------------------------- inference

def load_model(ck: Checkpoint) -> tuple[EncoderParams, StainMatrix]:
    cfg = EncoderConfig(**ck.config)
    return EncoderParams(cfg, dict(ck.params)), stains_from_params(ck.stain_params, ck.stain_names)


def _feather(start: int, length: int, total: int, ramp: int) -> np.ndarray:
    w = np.ones(length)
    if ramp <= 0:
        return w
    r = (np.arange(ramp) + 1.0) / (ramp + 1.0)
    if start > 0:
        w[:ramp] = np.minimum(w[:ramp], r)
    if start + length < total:
        w[-ramp:] = np.minimum(w[-ramp:], r[::-1])
    return w


def _starts(total: int, tile: int, stride: int) -> list:
    if total <= tile:
        return [0]
    starts = list(range(0, total - tile + 1, stride))
    if starts[-1] + tile < total:
        starts.append(total - tile)
    return starts


def separate(ck: Checkpoint, x: np.ndarray, names: Sequence[str] | None = None,
             tile: int = 128, overlap: int = 16) -> ConcentrationMap:
    """Concentration map for an image of any size.

    Images larger than ``tile`` are split into overlapping tiles (stride
    ``tile - overlap``) blended with linear feathering.
    """
    if names is not None and tuple(names) != tuple(ck.stain_names):
        raise ValueError(f"checkpoint stains {list(ck.stain_names)} do not match {list(names)}")
    if tile % 4 or overlap % 4 or overlap >= tile:
        raise ValueError("tile and overlap must be multiples of 4 with overlap < tile")
    params, _ = load_model(ck)
    x = np.asarray(x, dtype=np.float64)
    h, w, _ = x.shape
    H, W = -(-h // 4) * 4, -(-w // 4) * 4
    if (H, W) != (h, w):
        padded = np.ones((H, W, 3))
        padded[:h, :w] = x
        x = padded
    th, tw = min(tile, H), min(tile, W)
    if th == H and tw == W:
        out = encode(params, x).values
    else:
        K = params.config.K
        acc = np.zeros((H, W, K))
        wsum = np.zeros((H, W, 1))
        for i in _starts(H, th, th - overlap):
            wy = _feather(i, th, H, overlap)
            for j in _starts(W, tw, tw - overlap):
                wx = _feather(j, tw, W, overlap)
                wt = np.outer(wy, wx)[..., None]
                acc[i:i + th, j:j + tw] += wt * encode(params, x[i:i + th, j:j + tw]).values
                wsum[i:i + th, j:j + tw] += wt
        out = (acc / wsum).astype(np.float32)
    return ConcentrationMap(out[:h, :w], tuple(ck.stain_names))
