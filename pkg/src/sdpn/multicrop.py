"""Multi-crop sampling: one clean global view plus four augmented local views."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform
from .augment import AugmentConfig, AugmentStats, NoiseSource, RirSource, apply_rir, mix_noise, spec_augment
from .features import FbankConfig, compute_fbank

log = logging.getLogger(__name__)

GLOBAL_VIEW_S = 4.0
LOCAL_VIEW_S = 2.0
N_LOCAL_VIEWS = 4


@dataclass
class CropSet:
    """Views of one utterance as feature matrices (frames x mel bins)."""

    utterance_id: str
    global_view: np.ndarray
    local_views: list[np.ndarray]
    global_offset: int = 0
    local_offsets: list[int] = field(default_factory=list)


def sample_multicrop(
    waveform: Waveform,
    aug: AugmentConfig,
    fbank: FbankConfig,
    rng: np.random.Generator,
    *,
    utterance_id: str = "",
    noise_source: NoiseSource | None = None,
    rir_source: RirSource | None = None,
    stats: AugmentStats | None = None,
    global_s: float = GLOBAL_VIEW_S,
    local_s: float = LOCAL_VIEW_S,
    n_locals: int = N_LOCAL_VIEWS,
    dtype=np.float32,
) -> CropSet:
    """Sample one global and `n_locals` local segments and featurize them.

    The global view is featurized untouched. Each local view optionally gets
    additive noise and reverberation (each with probability aug.wav_prob)
    followed by SpecAugment. Deterministic given the rng state.
    """
    sr = waveform.sample_rate
    x = waveform.samples
    n_global = int(round(global_s * sr))
    n_local = int(round(local_s * sr))
    if x.size < n_global:
        log.warning(
            "utterance %s (%d samples) shorter than the %d-sample global view; wrapping",
            utterance_id or "<unnamed>",
            x.size,
            n_global,
        )
        x = np.tile(x, math.ceil(n_global / x.size))[:n_global]
    n = x.size

    if aug.wav_augment:
        if noise_source is None:
            noise_source = NoiseSource(aug.noise_source, sr)
        if rir_source is None:
            rir_source = RirSource(aug.rir_source, sr)

    global_offset = int(rng.integers(0, n - n_global + 1))
    global_seg = Waveform(x[global_offset : global_offset + n_global], sr)
    global_view = compute_fbank(global_seg, fbank, dtype=dtype)

    local_views = []
    local_offsets = []
    for _ in range(n_locals):
        offset = int(rng.integers(0, n - n_local + 1))
        local_offsets.append(offset)
        seg = Waveform(x[offset : offset + n_local].copy(), sr)
        if aug.wav_augment:
            if rng.random() < aug.wav_prob:
                noise = noise_source.sample(n_local, rng)
                snr = float(rng.uniform(*aug.snr_range_db))
                seg = mix_noise(seg, noise, snr, rng)
                if stats is not None:
                    stats.noise_mixes += 1
            if rng.random() < aug.wav_prob:
                rir = rir_source.sample(rng)
                seg = apply_rir(seg, rir)
                if stats is not None:
                    stats.rir_applications += 1
        feats = compute_fbank(seg, fbank, dtype=dtype)
        if aug.spec_augment:
            feats = spec_augment(feats, aug, rng, stats)
        local_views.append(feats)

    return CropSet(
        utterance_id=utterance_id,
        global_view=global_view,
        local_views=local_views,
        global_offset=global_offset,
        local_offsets=local_offsets,
    )
