"""
Two training stages and a probe
===============================

A short run of both stages on a small tone corpus, then a linear probe on
mean-pooled embeddings. Runs in a few minutes on one core; the acceptance
suite does the full-length version.
"""

import logging

import numpy as np

from codecmae import (
    LossConfig,
    MaskConfig,
    MaskedAutoencoder,
    ModelConfig,
    SynthSpec,
    TrainConfig,
    compute_gamma,
    extract_audio_embeddings,
    melspectrogram,
    pool_mean,
    pretrain,
    selftrain_stage,
    synth_dataset,
    train_codebooks,
    train_probe,
)
from codecmae.probe import bootstrap_ci, linear_probe_grid

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = [item.audio for item in synth_dataset(SynthSpec(n_items=120), np.random.default_rng(0))]
feats = [melspectrogram(c, 128) for c in corpus]

# stage 1 targets: an 8 x 64 residual quantizer fit on the corpus itself
books = train_codebooks(feats, 8, 64, np.random.default_rng(1), max_frames=10000)
gamma = compute_gamma(books, feats[:40])

model_cfg = ModelConfig.preset("desk")
train_cfg = TrainConfig(lr=1e-3, batch_size=4, eval_every=100, eval_items=16)
stage1 = pretrain(corpus, books, model_cfg, LossConfig(0.9, gamma), train_cfg, MaskConfig(0.5, 15), steps=400)
print("stage 1 loss by step:", [(s, round(loss, 3)) for s, loss, *_ in stage1.history])

# stage 2: cluster the stage-1 embeddings and learn to predict the cluster IDs
stage2, kmeans = selftrain_stage(stage1, corpus, 16, train_cfg, sample_size=40, steps=200)
print("k-means distortion:", round(kmeans.distortion_history[0], 3), "->", round(kmeans.distortion_history[-1], 3))
print("stage 2 masked accuracy:", round(stage2.history[-1][2], 3), "chance", 1 / 16)

# probe: fresh clips, frozen encoder, mean over frames, linear classifier
task = synth_dataset(SynthSpec(n_items=160), np.random.default_rng(2))
y = np.array([item.label for item in task])


def probe_accuracy(model, name):
    x = np.stack([pool_mean(extract_audio_embeddings(item.audio, model.eval()).data) for item in task])
    probe = train_probe(x[:96], y[:96], x[96:128], y[96:128], grid=linear_probe_grid(), seed=0)
    hits = (probe.predict(x[128:]) == y[128:]).astype(float)
    low, high, dev = bootstrap_ci(hits, rng=np.random.default_rng(3))
    print(f"{name:>12}: accuracy {hits.mean():.3f}  95% CI [{low:.3f}, {high:.3f}]  +/- {dev:.3f}")


# a freshly initialised encoder is close to a normalised random projection of the
# log-mel frames, which already separates clean tones well; it is a strong baseline
probe_accuracy(stage2.model, "self-trained")
probe_accuracy(stage1.model, "stage 1")
probe_accuracy(MaskedAutoencoder(model_cfg, seed=7), "random init")
