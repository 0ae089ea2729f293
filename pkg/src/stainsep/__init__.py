"""Unsupervised stain separation for multiplex IHC brightfield images."""

from .stains import (StainMatrix, ConcentrationMap, rgb_to_od, bl_decode, normalize_columns,
                     render_single_channel, render_knockout, INITIAL_STAINS, LEARNED_STAINS,
                     STAIN_NAMES)
from .baseline import pinv_unmix, nnls_unmix
from .encoder import EncoderConfig, build_encoder, encode
from .losses import LossWeights
from .synth import SceneSpec, generate_scene, recovery_score
from .metrics import channel_crossover, reconstruction_metrics, mean_crossover_over_corpus
from .trainer import TrainConfig, HueMaskSpec, train, separate, make_hue_mask, ingest_patches

__version__ = "0.1.0"
