"""
Turning tones into discrete targets
===================================

A handful of synthetic pitch clips go through the log-mel frontend, a small
residual quantizer is fit on the frames, and we look at how much of the signal
each quantizer stage explains.
"""

import numpy as np

from codecmae import SynthSpec, compute_gamma, melspectrogram, rvq_decode, rvq_encode, synth_dataset, train_codebooks

rng = np.random.default_rng(0)

# 40 four-second sine clips, eight pitch classes a fourth apart
clips = synth_dataset(SynthSpec(n_items=40), rng)
print("clip 0: label", clips[0].label, "samples", clips[0].audio.samples.shape)

# 640-sample windows, 320-sample hop at 24 kHz: 75 frames per second
feats = [melspectrogram(item.audio, 128) for item in clips]
print("features per clip:", feats[0].data.shape, "at", feats[0].frame_rate, "frames/s")

# the loudest mel band follows the pitch class
for item, f in list(zip(clips, feats))[:8]:
    print(f"  class {item.label}: peak band {int(np.argmax(f.data.mean(axis=0)))}")

# eight stages of 64 entries, each fit by k-means on what the previous ones left over
books = train_codebooks(feats, 8, 64, rng)

x = feats[0].data
for depth in (1, 2, 4, 8):
    codes, _ = rvq_encode(x, books[:depth])
    err = np.mean((rvq_decode(codes, books[:depth]).data - x) ** 2)
    print(f"{depth} stage(s): reconstruction MSE {err:.2e}")

# later stages carry less energy, so their prediction errors count for less
gamma = compute_gamma(books, feats)
print("codebook weights:", np.round(gamma.gamma, 3))

codes, _ = rvq_encode(x, books)
print("first five frames, one row per stage:")
print(codes.indices[:, :5])
