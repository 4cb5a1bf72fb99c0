"""Waveform and feature-domain augmentation.

WavAugment = additive noise at a target SNR plus reverberation by impulse
response convolution. SpecAugment = one time mask and one frequency mask
filled with the per-utterance feature mean. Synthetic noise/RIR sources are
built in so no external corpora are required; directories of WAV files are
accepted when available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import Waveform, read_wav


@dataclass
class AugmentConfig:
    wav_augment: bool = True
    spec_augment: bool = True
    snr_range_db: tuple[float, float] = (0.0, 15.0)
    noise_source: str = "synthetic-white"  # or a directory of WAV files
    rir_source: str = "synthetic-exponential"  # or a directory of WAV files
    time_mask_max: int = 10
    freq_mask_max: int = 6
    # chance of applying each waveform transform to a local view
    wav_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if hi < lo:
            raise ValueError(f"empty SNR range {self.snr_range_db}")
        if self.time_mask_max < 0 or self.freq_mask_max < 0:
            raise ValueError("mask maxima must be >= 0")
        if not 0.0 <= self.wav_prob <= 1.0:
            raise ValueError("wav_prob must lie in [0, 1]")


@dataclass
class AugmentStats:
    """Instrumentation counters, incremented once per applied transform."""

    noise_mixes: int = 0
    rir_applications: int = 0
    spec_masks: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "noise_mixes": self.noise_mixes,
            "rir_applications": self.rir_applications,
            "spec_masks": self.spec_masks,
        }


def mix_noise(
    clean: Waveform,
    noise: Waveform,
    snr_db: float,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """Add noise scaled so that 10*log10(P_clean / P_noise) equals snr_db.

    The noise is tiled/cropped to the clean length; the crop offset is drawn
    from rng when there is room to choose.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: clean {clean.sample_rate}, noise {noise.sample_rate}"
        )
    n = len(clean)
    seg = noise.samples
    if seg.size < n:
        seg = np.tile(seg, math.ceil(n / seg.size))
    slack = seg.size - n
    offset = int(rng.integers(0, slack + 1)) if (rng is not None and slack > 0) else 0
    seg = seg[offset : offset + n]

    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(seg**2))
    if p_noise == 0.0:
        return Waveform(clean.samples.copy(), clean.sample_rate)
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * seg, clean.sample_rate)


def apply_rir(wave: Waveform, rir: Waveform) -> Waveform:
    """Convolve with an impulse response, keep the input length and peak level."""
    if wave.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: wave {wave.sample_rate}, rir {rir.sample_rate}"
        )
    if len(rir) == 0:
        raise ValueError("empty impulse response")
    out = fftconvolve(wave.samples, rir.samples)[: len(wave)]
    peak_in = float(np.max(np.abs(wave.samples)))
    peak_out = float(np.max(np.abs(out)))
    out *= peak_in / max(peak_out, 1e-12)
    return Waveform(out, wave.sample_rate)


def spec_augment(
    features: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    stats: AugmentStats | None = None,
) -> np.ndarray:
    """Apply exactly one time mask and one frequency mask, mean-filled."""
    if features.size == 0:
        raise ValueError("empty feature matrix")
    n_frames, n_bins = features.shape
    out = features.copy()
    fill = features.mean()

    t_width = min(int(rng.integers(0, config.time_mask_max + 1)), n_frames)
    t_start = int(rng.integers(0, n_frames - t_width + 1))
    out[t_start : t_start + t_width, :] = fill

    f_width = min(int(rng.integers(0, config.freq_mask_max + 1)), n_bins)
    f_start = int(rng.integers(0, n_bins - f_width + 1))
    out[:, f_start : f_start + f_width] = fill

    if stats is not None:
        stats.spec_masks += 1
    return out


def synthetic_white_noise(n_samples: int, sample_rate: int, rng) -> Waveform:
    return Waveform(rng.standard_normal(n_samples), sample_rate)


def synthetic_exponential_rir(
    sample_rate: int, rng, rt60_s: float = 0.3, length_s: float = 0.35
) -> Waveform:
    """Random impulse with an exponential decay envelope (~RT60 0.3 s)."""
    n = int(round(length_s * sample_rate))
    t = np.arange(n) / sample_rate
    tau = rt60_s * 20.0 * math.log10(math.e) / 60.0
    rir = np.exp(-t / tau) * rng.standard_normal(n)
    rir[0] = 1.0  # direct path
    return Waveform(rir, sample_rate)


def _list_wavs(directory) -> list[Path]:
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise ValueError(f"no .wav files in {directory}")
    return paths


class NoiseSource:
    """Draws noise waveforms, either synthetic white or from a WAV folder."""

    def __init__(self, spec: str, sample_rate: int):
        self.sample_rate = sample_rate
        if spec == "synthetic-white":
            self._paths = None
        else:
            self._paths = _list_wavs(spec)

    def sample(self, n_samples: int, rng) -> Waveform:
        if self._paths is None:
            return synthetic_white_noise(n_samples, self.sample_rate, rng)
        path = self._paths[int(rng.integers(0, len(self._paths)))]
        return read_wav(path)


class RirSource:
    """Draws impulse responses, synthetic exponential or from a WAV folder."""

    def __init__(self, spec: str, sample_rate: int):
        self.sample_rate = sample_rate
        if spec == "synthetic-exponential":
            self._paths = None
        else:
            self._paths = _list_wavs(spec)

    def sample(self, rng) -> Waveform:
        if self._paths is None:
            return synthetic_exponential_rir(self.sample_rate, rng)
        path = self._paths[int(rng.integers(0, len(self._paths)))]
        return read_wav(path)
