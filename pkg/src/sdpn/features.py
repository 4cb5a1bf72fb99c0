"""Log mel filterbank (FBank) feature extraction."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .audio import Waveform


@dataclass
class FbankConfig:
    n_mels: int = 80
    win_length_ms: float = 25.0
    hop_length_ms: float = 10.0
    n_fft: int = 512
    fmin: float = 20.0
    fmax: float | None = None  # None -> sample_rate / 2
    log_floor: float = 1e-10
    pre_emphasis: float = 0.97

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.win_length_ms < self.hop_length_ms:
            raise ValueError("window must be at least as long as the hop")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def win_samples(self, sample_rate: int) -> int:
        return int(round(self.win_length_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_length_ms * sample_rate / 1000.0))

    def n_frames(self, n_samples: int, sample_rate: int) -> int:
        win = self.win_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        if n_samples < win:
            raise ValueError(f"waveform of {n_samples} samples is shorter than one window ({win})")
        return 1 + (n_samples - win) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels)[1:-1]


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float):
    """(n_mels, n_fft//2 + 1) triangular weights on the FFT bin grid."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    edges = mel_to_hz(mels)  # left, centers..., right
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


@lru_cache(maxsize=8)
def _hamming(win: int, dtype_str: str):
    return np.hamming(win).astype(np.dtype(dtype_str))


def compute_fbank(
    waveform: Waveform, config: FbankConfig, dtype=np.float32
) -> np.ndarray:
    """Log mel filterbank energies, shape (n_frames, n_mels).

    Chain: pre-emphasis -> Hamming-windowed frames -> |FFT|^2 -> mel
    triangles -> natural log with a floor.
    """
    sr = waveform.sample_rate
    win = config.win_samples(sr)
    hop = config.hop_samples(sr)
    n_frames = config.n_frames(len(waveform), sr)  # raises when too short
    if config.n_fft < win:
        raise ValueError(f"n_fft={config.n_fft} is smaller than the window ({win} samples)")

    # the whole spectral path runs in the requested dtype; float32 halves
    # the FFT cost, which dominates crop preparation during training
    dtype = np.dtype(dtype)
    x = waveform.samples.astype(dtype)
    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - dtype.type(config.pre_emphasis) * x[:-1]

    frames = np.lib.stride_tricks.sliding_window_view(emphasized, win)[::hop]
    assert frames.shape[0] == n_frames
    frames = frames * _hamming(win, dtype.str)

    spectrum = scipy.fft.rfft(frames, n=config.n_fft, axis=1)
    power = (spectrum.real**2 + spectrum.imag**2).astype(dtype)
    fmax = config.fmax if config.fmax is not None else sr / 2.0
    fb = _mel_filterbank(config.n_mels, config.n_fft, sr, config.fmin, fmax)
    mel_energy = power @ fb.T.astype(dtype)
    return np.log(np.maximum(mel_energy, dtype.type(config.log_floor)))
