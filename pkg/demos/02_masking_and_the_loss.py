"""
Span masks and the weighted loss
================================

Masks hide runs of frames; the encoder only ever sees what is left, and the
loss splits its weight between hidden and visible frames.
"""

import numpy as np

from codecmae import (
    CodebookWeights,
    MaskSpec,
    LossConfig,
    MaskedAutoencoder,
    ModelConfig,
    TokenTargets,
    decode,
    encode,
    sample_mask,
    weighted_ce,
)

rng = np.random.default_rng(1)

# half of 300 frames as the target, 15-frame runs: 10 starts, overlaps shrink the total
mask = sample_mask(300, 0.5, 15, rng)
print("masked frames:", mask.n_masked, "visible:", mask.n_visible)
print("".join("#" if f else "." for f in mask.flags()[:120]))

fractions = [sample_mask(300, 0.5, 15, rng).n_masked / 300 for _ in range(2000)]
print(f"average masked fraction over 2000 draws: {np.mean(fractions):.3f}")

# the encoder input shrinks to the visible frames only
model = MaskedAutoencoder(ModelConfig(), seed=0).eval()
feats = rng.standard_normal((300, 128))
hidden = encode(feats, mask, model)
print("encoder output:", hidden.data.shape)

# the decoder restores full length and predicts every codebook at every frame
post = decode(hidden, mask, model)
print("posteriors:", post.probs.shape, "row sums ~", float(post.probs.sum(-1).mean()))

# untrained heads are close to uniform, so the loss starts near log K
targets = TokenTargets(rng.integers(0, 64, (8, 300)), 64)
cfg = LossConfig(delta=0.9, gamma=CodebookWeights.uniform(8))
print(f"initial loss {weighted_ce(targets, post, mask, cfg):.4f}  log 64 = {np.log(64):.4f}")

# with delta = 0.9 a hidden frame moves the loss nine times as much as a visible one
# when both sets are the same size
half = MaskSpec.from_masked(range(150), 300)
probs = np.full((8, 300, 64), 1 / 64)
base = weighted_ce(targets, probs, half, cfg)
for t in (10, 200):
    p = probs.copy()
    p[:, t] = 0.5 / 63
    p[np.arange(8), t, targets.indices[:, t]] = 0.5
    side = "hidden " if t < 150 else "visible"
    print(f"sharpen {side} frame {t}: loss drops by {base - weighted_ce(targets, p, half, cfg):.5f}")
