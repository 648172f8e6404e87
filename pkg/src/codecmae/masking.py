"""Span masking over frames and the gather/scatter maps around the encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .frontend import FeatureSequence

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray
    visible: np.ndarray
    n_frames: int
    proportion: float = 0.0
    span: int = 1

    @classmethod
    def from_masked(cls, masked, n_frames: int, proportion: float = 0.0, span: int = 1) -> "MaskSpec":
        flags = np.zeros(n_frames, dtype=bool)
        flags[np.asarray(masked, dtype=np.int64)] = True
        return cls(np.flatnonzero(flags), np.flatnonzero(~flags), n_frames, proportion, span)

    @classmethod
    def empty(cls, n_frames: int) -> "MaskSpec":
        return cls.from_masked([], n_frames)

    @property
    def n_masked(self) -> int:
        return self.masked.shape[0]

    @property
    def n_visible(self) -> int:
        return self.visible.shape[0]

    def flags(self) -> np.ndarray:
        f = np.zeros(self.n_frames, dtype=bool)
        f[self.masked] = True
        return f


def n_starts(n_frames: int, proportion: float, span: int) -> int:
    return math.ceil(proportion * n_frames / span)


def sample_mask(n_frames: int, proportion: float, span: int, rng: np.random.Generator) -> MaskSpec:
    """Draw ``ceil(proportion * T / span)`` distinct start frames and mask ``span`` frames
    from each (clipped at the end). Overlapping spans merge."""
    if n_frames <= 0:
        raise ShapeError("cannot mask an empty sequence")
    if not 0.0 < proportion < 1.0:
        raise ConfigError(f"mask proportion must be in (0, 1), got {proportion}")
    if not 1 <= span <= n_frames:
        raise ConfigError(f"mask span must be in [1, {n_frames}], got {span}")
    n = n_starts(n_frames, proportion, span)
    for _ in range(MAX_ATTEMPTS):
        starts = rng.choice(n_frames, size=n, replace=False)
        flags = np.zeros(n_frames, dtype=bool)
        for s in starts:
            flags[s:s + span] = True
        if not flags.all():
            return MaskSpec(np.flatnonzero(flags), np.flatnonzero(~flags), n_frames, proportion, span)
    raise ConfigError(
        f"could not leave any frame visible after {MAX_ATTEMPTS} attempts "
        f"(T={n_frames}, proportion={proportion}, span={span})"
    )


def _rows(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureSequence) else np.asarray(x)


def gather_visible(x, mask: MaskSpec) -> FeatureSequence:
    data = _rows(x)
    if data.shape[0] != mask.n_frames:
        raise ShapeError(f"sequence has {data.shape[0]} rows, mask expects {mask.n_frames}")
    kind = x.kind if isinstance(x, FeatureSequence) else "embedding"
    rate = x.frame_rate if isinstance(x, FeatureSequence) else 75.0
    return FeatureSequence(data[mask.visible], rate, kind)


def scatter_with_mask_tokens(e, mask: MaskSpec, mask_token) -> FeatureSequence:
    """Expand visible rows back to full length, filling masked slots with ``mask_token``."""
    data = _rows(e)
    token = np.asarray(mask_token)
    if data.shape[0] != mask.n_visible:
        raise ShapeError(f"sequence has {data.shape[0]} rows, mask leaves {mask.n_visible} visible")
    if token.shape != (data.shape[1],):
        raise ShapeError(f"mask token shape {token.shape} does not match width {data.shape[1]}")
    out = np.empty((mask.n_frames, data.shape[1]), dtype=np.result_type(data, token))
    out[mask.visible] = data
    out[mask.masked] = token
    rate = e.frame_rate if isinstance(e, FeatureSequence) else 75.0
    return FeatureSequence(out, rate, "decoder_input")
