"""Second-stage targets: k-means cluster IDs of a frozen model's last encoder layer."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .audio_io import AudioBuffer, random_crop
from .errors import ConfigError
from .frontend import melspectrogram
from .kmeans import KMeansModel, kmeans_assign, kmeans_fit
from .model import MaskedAutoencoder
from .rvq import TokenTargets

__all__ = ["KMeansModel", "kmeans_assign", "kmeans_fit", "ClusterTargetProvider", "build_selftrain_targets"]


@dataclass
class ClusterTargetProvider:
    """Maps audio to per-frame cluster labels (``1 x T`` token targets)."""

    model: MaskedAutoencoder
    kmeans: KMeansModel
    n_mels: int

    def embeddings(self, feats: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(feats), dtype=self.model.proj.weight.dtype)
            return self.model.embed(x).double().numpy()

    def labels_for_features(self, feats: np.ndarray) -> np.ndarray:
        """``B x T x F`` features to ``B x T`` labels."""
        emb = self.embeddings(feats)
        b, t, d = emb.shape
        return kmeans_assign(self.kmeans, emb.reshape(-1, d)).reshape(b, t)

    def __call__(self, audio: AudioBuffer) -> TokenTargets:
        feats = melspectrogram(audio, self.n_mels).data[None]
        return TokenTargets(self.labels_for_features(feats), self.kmeans.k)


def build_selftrain_targets(
    model: MaskedAutoencoder,
    corpus: list[AudioBuffer],
    sample_size: int,
    k: int,
    rng: np.random.Generator,
    crop_s: float = 4.0,
    max_frames: int | None = 30000,
) -> tuple[KMeansModel, ClusterTargetProvider]:
    """Fit k-means on embeddings of ``sample_size`` randomly chosen, randomly cropped clips.

    The provider holds a frozen copy of ``model`` so later training of the
    original does not move the targets.
    """
    if not corpus:
        raise ConfigError("self-training needs a non-empty corpus")
    frozen = copy.deepcopy(model).eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    n_mels = frozen.cfg.input_dim
    pick = rng.choice(len(corpus), size=min(sample_size, len(corpus)), replace=False)
    provider = ClusterTargetProvider(frozen, None, n_mels)
    feats = np.stack([melspectrogram(random_crop(corpus[i], crop_s, rng), n_mels).data for i in np.sort(pick)])
    points = np.concatenate([provider.embeddings(feats[i:i + 32]).reshape(-1, frozen.cfg.dim) for i in range(0, len(feats), 32)])
    if max_frames is not None and points.shape[0] > max_frames:
        points = points[np.sort(rng.choice(points.shape[0], size=max_frames, replace=False))]
    provider.kmeans = kmeans_fit(points, k, rng)
    return provider.kmeans, provider
