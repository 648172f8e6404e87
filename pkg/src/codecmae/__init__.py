"""Masked-autoencoder audio representation learning with residual-quantizer targets."""

from .audio_io import AudioBuffer, SynthSpec, chunk_for_inference, load_wav, random_crop, synth_dataset, write_wav
from .frontend import FeatureSequence, melspectrogram, stft
from .kmeans import KMeansModel, kmeans_assign, kmeans_fit
from .masking import MaskSpec, gather_visible, sample_mask, scatter_with_mask_tokens
from .model import (
    MaskedAutoencoder,
    ModelConfig,
    Posteriors,
    backward,
    decode,
    encode,
    extract_audio_embeddings,
    extract_embeddings,
    positional_embeddings,
)
from .objective import LossConfig, masked_accuracy, weighted_ce
from .probe import ProbeReport, bootstrap_ci, global_score, mean_average_precision, pool_mean, train_probe
from .rvq import Codebook, CodebookWeights, TokenTargets, compute_gamma, rvq_decode, rvq_encode, train_codebooks
from .selftrain import build_selftrain_targets
from .trainer import AdamWState, MaskConfig, TrainConfig, adamw_step, pretrain, selftrain_stage

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "AudioBuffer",
    "Codebook",
    "CodebookWeights",
    "FeatureSequence",
    "KMeansModel",
    "LossConfig",
    "MaskConfig",
    "MaskSpec",
    "MaskedAutoencoder",
    "ModelConfig",
    "Posteriors",
    "ProbeReport",
    "SynthSpec",
    "TokenTargets",
    "TrainConfig",
    "adamw_step",
    "backward",
    "bootstrap_ci",
    "build_selftrain_targets",
    "chunk_for_inference",
    "compute_gamma",
    "decode",
    "encode",
    "extract_audio_embeddings",
    "extract_embeddings",
    "gather_visible",
    "global_score",
    "kmeans_assign",
    "kmeans_fit",
    "load_wav",
    "masked_accuracy",
    "mean_average_precision",
    "melspectrogram",
    "pool_mean",
    "positional_embeddings",
    "pretrain",
    "random_crop",
    "rvq_decode",
    "rvq_encode",
    "sample_mask",
    "scatter_with_mask_tokens",
    "selftrain_stage",
    "stft",
    "synth_dataset",
    "train_codebooks",
    "train_probe",
    "weighted_ce",
    "write_wav",
]
