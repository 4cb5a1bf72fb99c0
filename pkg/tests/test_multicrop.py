import logging

import numpy as np
import pytest

from sdpn.audio import Waveform
from sdpn.augment import AugmentConfig, AugmentStats
from sdpn.features import FbankConfig, compute_fbank
from sdpn.multicrop import sample_multicrop

FB = FbankConfig(n_mels=24)
SR = 16000


def _utterance(seconds=5.0, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * SR)) / SR
    return Waveform(0.5 * np.sin(2 * np.pi * 220 * t) + 0.05 * rng.standard_normal(t.size), SR)


def test_view_counts_and_frame_counts():
    # 5 s input: global 4 s -> 398 frames, locals 2 s -> 198 frames
    crops = sample_multicrop(_utterance(), AugmentConfig(), FB, np.random.default_rng(0))
    assert crops.global_view.shape == (398, 24)
    assert len(crops.local_views) == 4
    for v in crops.local_views:
        assert v.shape == (198, 24)


def test_determinism_given_seed():
    a = sample_multicrop(_utterance(), AugmentConfig(), FB, np.random.default_rng(42))
    b = sample_multicrop(_utterance(), AugmentConfig(), FB, np.random.default_rng(42))
    np.testing.assert_array_equal(a.global_view, b.global_view)
    for va, vb in zip(a.local_views, b.local_views):
        np.testing.assert_array_equal(va, vb)
    assert a.global_offset == b.global_offset
    assert a.local_offsets == b.local_offsets


def test_no_augmentation_gives_plain_fbank():
    wave = _utterance()
    off = AugmentConfig(wav_augment=False, spec_augment=False)
    crops = sample_multicrop(wave, off, FB, np.random.default_rng(1))
    for offset, view in zip(crops.local_offsets, crops.local_views):
        seg = Waveform(wave.samples[offset : offset + 2 * SR], SR)
        np.testing.assert_array_equal(view, compute_fbank(seg, FB))


def test_global_view_is_never_augmented():
    # even with aggressive augmentation the global view equals the plain
    # FBank of its segment, and only local transforms are counted
    wave = _utterance()
    aug = AugmentConfig(wav_prob=1.0)
    stats = AugmentStats()
    crops = sample_multicrop(wave, aug, FB, np.random.default_rng(2), stats=stats)
    seg = Waveform(wave.samples[crops.global_offset : crops.global_offset + 4 * SR], SR)
    np.testing.assert_array_equal(crops.global_view, compute_fbank(seg, FB))
    assert stats.noise_mixes == 4
    assert stats.rir_applications == 4
    assert stats.spec_masks == 4


def test_counters_zero_when_disabled():
    stats = AugmentStats()
    off = AugmentConfig(wav_augment=False, spec_augment=False)
    sample_multicrop(_utterance(), off, FB, np.random.default_rng(3), stats=stats)
    assert stats.as_dict() == {"noise_mixes": 0, "rir_applications": 0, "spec_masks": 0}


def test_short_utterance_wraps_with_warning(caplog):
    short = _utterance(seconds=2.5)
    with caplog.at_level(logging.WARNING):
        crops = sample_multicrop(short, AugmentConfig(wav_augment=False, spec_augment=False),
                                 FB, np.random.default_rng(0), utterance_id="tiny")
    assert any("wrap" in m for m in caplog.messages)
    assert crops.global_view.shape == (398, 24)
