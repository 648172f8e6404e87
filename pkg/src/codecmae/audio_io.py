"""Audio buffers, WAV I/O, cropping/chunking policies and synthetic corpora."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, FormatError, ShapeError, UnsupportedFormatError

DEFAULT_SAMPLE_RATE = 24000


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ShapeError(f"audio must be mono, got shape {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        object.__setattr__(self, "samples", samples)
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


class LabeledAudio(NamedTuple):
    audio: AudioBuffer
    label: int


def load_wav(path, target_rate: int | None = None) -> AudioBuffer:
    """Read a PCM16 or float32 WAV file, downmixed to mono and scaled to [-1, 1].

    If ``target_rate`` is given and differs from the file's rate the signal is
    resampled with a polyphase windowed-sinc filter.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "format" in msg.lower() and "not supported" in msg.lower():
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: malformed WAV ({msg})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite samples")
    x = np.clip(x, -1.0, 1.0)
    out = AudioBuffer(x.astype(np.float32), int(rate))
    if target_rate is not None and target_rate != rate:
        out = resample(out, target_rate)
    return out


def write_wav(path, audio: AudioBuffer) -> None:
    """Write 16-bit PCM (values clipped to the int16 range)."""
    pcm = np.clip(np.round(np.asarray(audio.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    wavfile.write(Path(path), int(audio.sample_rate), pcm.astype(np.int16))


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    g = math.gcd(int(audio.sample_rate), int(target_rate))
    up, down = target_rate // g, audio.sample_rate // g
    y = resample_poly(np.asarray(audio.samples, dtype=np.float64), up, down, window=("kaiser", 5.0))
    return AudioBuffer(np.clip(y, -1.0, 1.0).astype(np.float32), int(target_rate))


def n_samples_for(duration_s: float, sample_rate: int) -> int:
    if duration_s <= 0:
        raise ConfigError(f"duration_s must be positive, got {duration_s}")
    return int(round(duration_s * sample_rate))


def draw_crop_offset(total: int, crop: int, rng: np.random.Generator) -> int:
    # always consumes one draw so the generator stream does not depend on clip length
    return int(rng.integers(0, max(total - crop, 0) + 1))


def crop_at(audio: AudioBuffer, offset: int, n: int) -> AudioBuffer:
    seg = audio.samples[offset:offset + n]
    if seg.shape[0] < n:
        seg = np.concatenate([seg, np.zeros(n - seg.shape[0], dtype=seg.dtype)])
    return AudioBuffer(seg, audio.sample_rate)


def random_crop(audio: AudioBuffer, duration_s: float, rng: np.random.Generator) -> AudioBuffer:
    n = n_samples_for(duration_s, audio.sample_rate)
    return crop_at(audio, draw_crop_offset(len(audio), n, rng), n)


def chunk_for_inference(audio: AudioBuffer, duration_s: float) -> list[AudioBuffer]:
    """Split into consecutive non-overlapping chunks; the last one is zero-padded."""
    if len(audio) == 0:
        raise ShapeError("cannot chunk an empty audio buffer")
    n = n_samples_for(duration_s, audio.sample_rate)
    return [crop_at(audio, start, n) for start in range(0, len(audio), n)]


# -- synthetic corpora ------------------------------------------------------

GENERATORS = ("pitch", "am_noise", "tone_noise")


@dataclass(frozen=True)
class SynthSpec:
    """Description of a synthetic labelled corpus.

    Generators:

    ``pitch``
        One sinusoid per clip. Class ``c`` has frequency
        ``base_hz * 2 ** (c * step_semitones / 12)``, i.e. a geometric series.
        Each clip draws a gain from ``gain_range``, a random phase and a detune
        of up to ``detune_cents``. If ``snr_db`` is set, white noise at an SNR
        drawn uniformly from that range is added.
    ``am_noise``
        White noise whose amplitude is modulated by a raised sinusoid; class
        ``c`` has modulation rate ``mod_base_hz * 2 ** (c * mod_step_octaves)``.
    ``tone_noise``
        The ``pitch`` generator with noise always on (``snr_db`` defaults to
        0..20 dB when unset).
    """

    generator: str = "pitch"
    n_items: int = 100
    n_classes: int = 8
    duration_s: float = 4.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    base_hz: float = 220.0
    step_semitones: float = 5.0
    gain_range: tuple[float, float] = (0.1, 0.9)
    detune_cents: float = 0.0
    snr_db: tuple[float, float] | None = None
    mod_base_hz: float = 0.5
    mod_step_octaves: float = 0.5
    extra: dict = field(default_factory=dict, compare=False)

    def frequencies(self) -> np.ndarray:
        return self.base_hz * 2.0 ** (np.arange(self.n_classes) * self.step_semitones / 12.0)

    def mod_rates(self) -> np.ndarray:
        return self.mod_base_hz * 2.0 ** (np.arange(self.n_classes) * self.mod_step_octaves)


def _add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(x.shape[0])
    p_sig = np.mean(x ** 2)
    p_noise = p_sig / 10.0 ** (snr_db / 10.0)
    return x + noise * np.sqrt(p_noise)


def _render(spec: SynthSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    n = n_samples_for(spec.duration_s, spec.sample_rate)
    t = np.arange(n) / spec.sample_rate
    gain = rng.uniform(*spec.gain_range)
    if spec.generator in ("pitch", "tone_noise"):
        cents = rng.uniform(-spec.detune_cents, spec.detune_cents) if spec.detune_cents else 0.0
        f = spec.frequencies()[label] * 2.0 ** (cents / 1200.0)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        snr = spec.snr_db
        if spec.generator == "tone_noise" and snr is None:
            snr = (0.0, 20.0)
        if snr is not None:
            x = _add_noise(x, rng.uniform(*snr), rng)
    else:
        rate = spec.mod_rates()[label]
        env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        x = env * rng.standard_normal(n) / 3.0
    x = gain * x / max(np.max(np.abs(x)), 1e-12)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def synth_dataset(spec: SynthSpec, rng: np.random.Generator) -> list[LabeledAudio]:
    if spec.generator not in GENERATORS:
        raise ConfigError(f"unknown synthetic generator {spec.generator!r}; expected one of {GENERATORS}")
    if spec.n_classes < 1 or spec.n_items < 0:
        raise ConfigError("synthetic spec needs n_classes >= 1 and n_items >= 0")
    labels = np.arange(spec.n_items) % spec.n_classes
    labels = labels[rng.permutation(spec.n_items)]
    return [
        LabeledAudio(AudioBuffer(_render(spec, int(c), rng), spec.sample_rate), int(c))
        for c in labels
    ]
