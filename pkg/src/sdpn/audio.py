"""WAV I/O and the in-memory waveform type.

Only 16-bit mono PCM RIFF/WAVE files are supported; anything else is
rejected rather than converted.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# int16 full scale; stored sample = pcm_value / PCM_SCALE
PCM_SCALE = 32768


class WavFormatError(Exception):
    """File is not a readable RIFF/WAVE container."""


class UnsupportedWavError(WavFormatError):
    """WAV file is valid but not 16-bit mono PCM."""


@dataclass
class Waveform:
    """Mono audio: float64 amplitudes, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform needs a non-empty 1-D sample array")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a 16-bit mono PCM WAV file, scaling samples to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sample_width = wf.getsampwidth()
            sample_rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except FileNotFoundError:
        raise
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAVE file: {exc}") from exc
    if n_channels != 1:
        raise UnsupportedWavError(f"{path}: expected mono, got {n_channels} channels")
    if sample_width != 2:
        raise UnsupportedWavError(
            f"{path}: expected 16-bit PCM, got {8 * sample_width}-bit"
        )
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: empty PCM payload")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, sample_rate)


def write_wav(waveform: Waveform, path) -> None:
    """Write 16-bit mono PCM. Out-of-range samples are clamped with a warning."""
    samples = waveform.samples
    if samples.size == 0:
        raise ValueError("refusing to write a zero-length waveform")
    n_out_of_range = int(np.count_nonzero(np.abs(samples) > 1.0))
    if n_out_of_range:
        log.warning(
            "write_wav(%s): clamping %d out-of-range samples to [-1, 1]",
            path,
            n_out_of_range,
        )
        samples = np.clip(samples, -1.0, 1.0)
    pcm = np.clip(np.rint(samples * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())
