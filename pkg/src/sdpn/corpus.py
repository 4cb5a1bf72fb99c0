"""Corpus metadata (TSV manifests) and the deterministic synthetic speaker corpus.

Each synthetic speaker is a fixed timbre profile: a fundamental frequency,
a harmonic amplitude vector (a jagged per-harmonic base pattern shared by
the whole corpus times a smooth per-speaker spectral envelope), and a
2nd-order resonant filter. Utterances of one speaker add random phases, a
slow f0 jitter trajectory bounded at 3 percent, and a -30 dB noise floor.

The distributions are tuned so that a randomly initialized encoder is close
to useless: fundamentals crowd within a few hertz of each other, per-speaker
envelopes are fractions of a decibel, and the jitter slides the shared
jagged harmonic pattern across filterbank bins, which buries raw feature
distances in utterance-level nuisance. Training has to learn
jitter-trajectory invariance before the envelope and resonance cues that
actually carry identity become usable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import Waveform, write_wav

# Utterances must cover the longest training view (the 4 s global crop).
MIN_UTT_DURATION_S = 4.0

F0_RANGE_HZ = (90.0, 300.0)
F0_MEAN_HZ = 105.0
F0_SPREAD_HZ = 1.5
HARMONIC_BASE_SIGMA = 1.2
ENVELOPE_TERMS = 4
ENVELOPE_SCALE = 0.03
SPECTRAL_TILT = 0.5
RESONANCE_RANGE_HZ = (1700.0, 2700.0)
POLE_RADIUS_RANGE = (0.42, 0.52)
F0_JITTER = 0.03
JITTER_COMPONENTS = 2
JITTER_RATE_HZ = (0.1, 0.6)
NOISE_FLOOR_DB = -30.0
PEAK_LEVEL = 0.9


class ManifestError(Exception):
    """Manifest file is malformed or inconsistent."""


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    duration_s: float


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ManifestError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)
            if e.duration_s <= 0:
                raise ManifestError(
                    f"{e.utterance_id}: duration must be positive, got {e.duration_s}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utterance_id: e for e in self.entries}

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})


def save_manifest(manifest: Manifest, path) -> None:
    """Write one tab-separated line per entry, paths relative to the manifest."""
    path = Path(path)
    lines = []
    for e in manifest.entries:
        rel = os.path.relpath(e.path, path.parent)
        lines.append(f"{e.utterance_id}\t{e.speaker_id}\t{rel}\t{e.duration_s:.6f}")
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path, check_paths: bool = True) -> Manifest:
    """Load a TSV manifest, resolving paths relative to the manifest file."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(
                f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        utt_id, spk_id, rel, dur = fields
        try:
            duration = float(dur)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad duration {dur!r}") from exc
        wav_path = Path(rel)
        if not wav_path.is_absolute():
            wav_path = (path.parent / wav_path).resolve()
        if check_paths and not wav_path.exists():
            raise ManifestError(f"{path}:{lineno}: audio file not found: {wav_path}")
        entries.append(ManifestEntry(utt_id, spk_id, str(wav_path), duration))
    return Manifest(entries)


@dataclass
class SynthCorpusConfig:
    n_speakers: int = 20
    utts_per_speaker: int = 50
    utt_duration_s: float = 5.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ValueError("n_speakers and utts_per_speaker must be >= 1")
        if self.utt_duration_s < MIN_UTT_DURATION_S:
            raise ValueError(
                f"utt_duration_s must be >= {MIN_UTT_DURATION_S} (global view length)"
            )
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True)
class _SpeakerProfile:
    f0_hz: float
    harmonic_gains: np.ndarray
    resonance_hz: float
    pole_radius: float


def _harmonic_base(seed: int, sample_rate: int) -> np.ndarray:
    """Jagged per-harmonic gain pattern shared by every speaker of a corpus."""
    max_harm = int(0.45 * sample_rate / F0_RANGE_HZ[0]) + 1
    rng = np.random.default_rng([seed, 0])
    return np.exp(rng.normal(0.0, HARMONIC_BASE_SIGMA, max_harm))


def _speaker_profile(seed: int, speaker: int, sample_rate: int) -> _SpeakerProfile:
    rng = np.random.default_rng([seed, 1, speaker])
    f0 = float(np.clip(rng.normal(F0_MEAN_HZ, F0_SPREAD_HZ), *F0_RANGE_HZ))
    n_harm = int(0.45 * sample_rate / f0)
    h = np.arange(1, n_harm + 1)
    # smooth random spectral envelope sampled at the harmonic frequencies
    coef = rng.normal(0.0, ENVELOPE_SCALE, ENVELOPE_TERMS)
    phase = rng.uniform(0.0, 2.0 * np.pi, ENVELOPE_TERMS)
    envelope = np.zeros(n_harm)
    for m in range(ENVELOPE_TERMS):
        envelope += coef[m] * np.cos(np.pi * (m + 1) * (h * f0) / (sample_rate / 2) + phase[m])
    base = _harmonic_base(seed, sample_rate)[:n_harm]
    gains = base * np.exp(envelope) / h**SPECTRAL_TILT
    resonance = rng.uniform(*RESONANCE_RANGE_HZ)
    radius = rng.uniform(*POLE_RADIUS_RANGE)
    return _SpeakerProfile(f0, gains, resonance, radius)


def _jitter_trajectory(n_samples: int, sample_rate: int, rng) -> np.ndarray:
    """Slow random modulation in [-1, 1] (a few drifting sinusoids)."""
    t = np.arange(n_samples) / sample_rate
    w = np.zeros(n_samples)
    for _ in range(JITTER_COMPONENTS):
        rate = rng.uniform(*JITTER_RATE_HZ)
        w += rng.uniform(0.4, 1.0) * np.sin(2.0 * np.pi * rate * t + rng.uniform(0.0, 2.0 * np.pi))
    return w / np.max(np.abs(w))


def _render_utterance(
    profile: _SpeakerProfile, n_samples: int, sample_rate: int, rng: np.random.Generator
) -> Waveform:
    f0_t = profile.f0_hz * (1.0 + F0_JITTER * _jitter_trajectory(n_samples, sample_rate, rng))
    base_phase = 2.0 * np.pi * np.cumsum(f0_t) / sample_rate
    n_harm = profile.harmonic_gains.size
    phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    sig = np.zeros(n_samples)
    for h in range(1, n_harm + 1):
        if h * profile.f0_hz * (1.0 + F0_JITTER) >= 0.45 * sample_rate:
            break
        sig += profile.harmonic_gains[h - 1] * np.sin(h * base_phase + phases[h - 1])
    omega = 2.0 * np.pi * profile.resonance_hz / sample_rate
    r = profile.pole_radius
    sig = lfilter([1.0], [1.0, -2.0 * r * math.cos(omega), r * r], sig)
    sig /= np.sqrt(np.mean(sig**2))
    noise = rng.standard_normal(n_samples) * 10.0 ** (NOISE_FLOOR_DB / 20.0)
    sig = sig + noise
    sig *= PEAK_LEVEL / np.max(np.abs(sig))
    return Waveform(sig, sample_rate)


def generate_synth_corpus(config: SynthCorpusConfig, out_dir) -> Manifest:
    """Render the synthetic corpus into out_dir and write manifest.tsv beside it.

    Byte-deterministic for a fixed config: every random quantity is drawn
    from a generator keyed on (seed, speaker, utterance).
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    n_samples = int(round(config.utt_duration_s * config.sample_rate))
    duration = n_samples / config.sample_rate

    entries = []
    for k in range(config.n_speakers):
        speaker_id = f"spk{k:04d}"
        profile = _speaker_profile(config.seed, k, config.sample_rate)
        spk_dir = wav_dir / speaker_id
        spk_dir.mkdir(exist_ok=True)
        for u in range(config.utts_per_speaker):
            rng = np.random.default_rng([config.seed, 2, k, u])
            wav = _render_utterance(profile, n_samples, config.sample_rate, rng)
            utt_id = f"{speaker_id}_utt{u:04d}"
            wav_path = spk_dir / f"{utt_id}.wav"
            write_wav(wav, wav_path)
            entries.append(ManifestEntry(utt_id, speaker_id, str(wav_path), duration))

    manifest = Manifest(entries)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def split_manifest(
    manifest: Manifest, holdout_per_speaker: int
) -> tuple[Manifest, Manifest]:
    """Split off the last `holdout_per_speaker` utterances of every speaker."""
    if holdout_per_speaker < 0:
        raise ValueError("holdout_per_speaker must be >= 0")
    train, heldout = [], []
    by_speaker: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_speaker.setdefault(e.speaker_id, []).append(e)
    for speaker in sorted(by_speaker):
        utts = sorted(by_speaker[speaker], key=lambda e: e.utterance_id)
        if holdout_per_speaker >= len(utts):
            raise ValueError(
                f"{speaker}: cannot hold out {holdout_per_speaker} of {len(utts)} utterances"
            )
        cut = len(utts) - holdout_per_speaker
        train.extend(utts[:cut])
        heldout.extend(utts[cut:])
    return Manifest(train), Manifest(heldout)
