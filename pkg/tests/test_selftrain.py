import numpy as np
import torch

from codecmae.audio_io import SynthSpec, synth_dataset
from codecmae.frontend import melspectrogram
from codecmae.kmeans import squared_distances
from codecmae.model import MaskedAutoencoder, ModelConfig
from codecmae.selftrain import build_selftrain_targets

CFG = ModelConfig(input_dim=32, dim=16, enc_layers=2, dec_layers=1, heads=2)


def corpus():
    return [it.audio for it in synth_dataset(SynthSpec(n_items=6, n_classes=3, duration_s=4.0), np.random.default_rng(0))]


def test_provider_labels_clip():
    clips = corpus()
    model = MaskedAutoencoder(CFG, seed=1)
    km, provider = build_selftrain_targets(model, clips, 4, 8, np.random.default_rng(2))
    targets = provider(clips[0])
    assert targets.indices.shape == (1, 300)
    assert targets.n_classes == 8
    # labels are the nearest centroid of each frame embedding
    emb = provider.embeddings(melspectrogram(clips[0], 32).data[None])[0]
    np.testing.assert_array_equal(targets.indices[0], squared_distances(emb, km.centroids).argmin(axis=1))


def test_deterministic_and_frozen():
    clips = corpus()
    model = MaskedAutoencoder(CFG, seed=1)
    km1, p1 = build_selftrain_targets(model, clips, 4, 8, np.random.default_rng(2))
    km2, p2 = build_selftrain_targets(model, clips, 4, 8, np.random.default_rng(2))
    assert km1.centroids.tobytes() == km2.centroids.tobytes()
    before = p1(clips[1]).indices.copy()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(1.0)
    np.testing.assert_array_equal(p1(clips[1]).indices, before)
    assert not any(p.requires_grad for p in p1.model.parameters())
    assert np.all(np.diff(km1.distortion_history) <= 1e-9 * km1.distortion_history[0])
