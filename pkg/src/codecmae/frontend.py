"""Frame-level input features: Hann STFT and log-mel spectrograms at 75 frames/s."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import AudioBuffer
from .errors import ConfigError, ShapeError

WIN_LENGTH = 640
HOP_LENGTH = 320
LOG_EPS = 1e-5

KINDS = ("mel", "embedding", "decoder_input")


@dataclass(frozen=True)
class FeatureSequence:
    data: np.ndarray
    frame_rate: float = 75.0
    kind: str = "mel"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"feature sequence must be T x F, got shape {data.shape}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown feature kind {self.kind!r}")
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def hann_window(n: int) -> np.ndarray:
    # periodic Hann (DFT-even), as used for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return n_samples // hop


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = frame_count(x.shape[0], hop)
    pad = win // 2
    mode = "reflect" if x.shape[0] > 1 else "constant"
    xp = np.pad(x, pad, mode=mode)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return xp[idx]


def stft(audio: AudioBuffer, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Centred Hann-windowed STFT, shape ``(T_a // hop, win // 2 + 1)``.

    Frame ``t`` is centred on sample ``t * hop`` (reflect padding at the edges).
    """
    if win <= 0 or hop <= 0:
        raise ConfigError(f"win and hop must be positive, got win={win} hop={hop}")
    if win % 2 or hop > win:
        raise ConfigError(f"need even win and hop <= win, got win={win} hop={hop}")
    if len(audio) < 1:
        raise ShapeError("stft needs at least one sample")
    x = np.asarray(audio.samples, dtype=np.float64)
    return np.fft.rfft(_frames(x, win, hop) * hann_window(win), axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # unit area in Hz: triangle of base (upper - lower) peaks at 2 / base
    fb *= 2.0 / (upper - lower)
    fb.setflags(write=False)
    return fb


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular, area-normalised mel filterbank spanning 0 Hz to Nyquist, ``(n_mels, n_fft//2+1)``."""
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    return _filterbank(int(sample_rate), int(n_fft), int(n_mels))


def melspectrogram(
    audio: AudioBuffer,
    n_mels: int = 128,
    win: int = WIN_LENGTH,
    hop: int = HOP_LENGTH,
    eps: float = LOG_EPS,
) -> FeatureSequence:
    """Log mel-filterbank energies, ``log(mel_power + eps)``."""
    fb = mel_filterbank(audio.sample_rate, win, n_mels)
    spec = stft(audio, win, hop)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ fb.T
    return FeatureSequence(np.log(mel + eps), frame_rate=audio.sample_rate / hop, kind="mel")
