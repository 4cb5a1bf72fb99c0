"""Speaker-verification evaluation: embeddings, trials, EER and minDCF."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import read_wav
from .corpus import Manifest
from .features import FbankConfig, compute_fbank
from .nn import Network


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


@dataclass
class DcfParams:
    p_target: float = 0.05
    c_fa: float = 1.0
    c_miss: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie strictly between 0 and 1")
        if self.c_fa <= 0 or self.c_miss <= 0:
            raise ValueError("costs must be positive")


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    mindcf: float
    mindcf_threshold: float
    n_trials: int
    n_target: int
    n_nontarget: int
    n_embeddings_computed: int

    def format_text(self) -> str:
        lines = [
            f"eer: {self.eer:.6f}",
            f"eer_threshold: {self.eer_threshold:.6f}",
            f"mindcf: {self.mindcf:.6f}",
            f"mindcf_threshold: {self.mindcf_threshold:.6f}",
            f"n_trials: {self.n_trials}",
            f"n_target: {self.n_target}",
            f"n_nontarget: {self.n_nontarget}",
        ]
        return "\n".join(lines)


def extract_embedding(network: Network, waveform, fbank: FbankConfig) -> np.ndarray:
    """Full-utterance embedding: plain FBank (no crops, no augmentation)."""
    feats = compute_fbank(waveform, fbank, dtype=network.dtype)
    return network.encoder_forward(feats[None, :, :], train=False)[0]


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def _validate_scores(scores: np.ndarray, labels: np.ndarray) -> None:
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not labels.any() or labels.all():
        raise ValueError("need at least one target and one non-target trial")


def _sweep_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between adjacent distinct scores, plus one beyond each end."""
    distinct = np.unique(scores)
    mid = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] - 1.0], mid, [distinct[-1] + 1.0]])


def _miss_fa_rates(
    scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """P_miss(t) = frac targets < t; P_fa(t) = frac non-targets >= t."""
    target_scores = np.sort(scores[labels])
    nontarget_scores = np.sort(scores[~labels])
    p_miss = np.searchsorted(target_scores, thresholds, side="left") / target_scores.size
    n_ge = nontarget_scores.size - np.searchsorted(nontarget_scores, thresholds, side="left")
    p_fa = n_ge / nontarget_scores.size
    return p_miss, p_fa


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps thresholds at score midpoints; when the miss and false-alarm
    rates never meet exactly, linearly interpolates between the two sweep
    points bracketing the crossing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    _validate_scores(scores, labels)
    thresholds = _sweep_thresholds(scores)
    p_miss, p_fa = _miss_fa_rates(scores, labels, thresholds)
    diff = p_miss - p_fa  # nondecreasing in t: -1 at far left, +1 at far right
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0.0:
        return float(p_miss[j]), float(thresholds[j])
    # interpolate between sweep points j-1 and j
    miss_a, miss_b = p_miss[j - 1], p_miss[j]
    fa_a, fa_b = p_fa[j - 1], p_fa[j]
    s = (fa_a - miss_a) / ((miss_b - miss_a) + (fa_a - fa_b))
    eer = miss_a + s * (miss_b - miss_a)
    threshold = thresholds[j - 1] + s * (thresholds[j] - thresholds[j - 1])
    return float(eer), float(threshold)


def compute_mindcf(scores, labels, params: DcfParams) -> tuple[float, float]:
    """Minimum normalized detection cost over the threshold sweep."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    _validate_scores(scores, labels)
    thresholds = _sweep_thresholds(scores)
    p_miss, p_fa = _miss_fa_rates(scores, labels, thresholds)
    dcf = params.c_miss * params.p_target * p_miss + params.c_fa * (1 - params.p_target) * p_fa
    dcf /= min(params.c_miss * params.p_target, params.c_fa * (1 - params.p_target))
    j = int(np.argmin(dcf))
    return float(dcf[j]), float(thresholds[j])


def make_trials(manifest: Manifest, n_target: int, n_nontarget: int, seed: int) -> list[Trial]:
    """Deterministically sample same-speaker and cross-speaker pairs.

    Sampling is without replacement; asking for more pairs than exist is an
    error.
    """
    by_speaker: dict[str, list[str]] = {}
    for e in manifest.entries:
        by_speaker.setdefault(e.speaker_id, []).append(e.utterance_id)
    for utts in by_speaker.values():
        utts.sort()
    speakers = sorted(by_speaker)

    same_pairs = [
        pair
        for spk in speakers
        for pair in itertools.combinations(by_speaker[spk], 2)
    ]
    if not same_pairs:
        raise ValueError("no speaker has two utterances; cannot build target trials")
    if n_target > len(same_pairs):
        raise ValueError(f"requested {n_target} target trials, only {len(same_pairs)} pairs exist")
    if len(speakers) < 2:
        raise ValueError("need at least 2 speakers for non-target trials")

    rng = np.random.default_rng([seed, 3])
    picked = rng.choice(len(same_pairs), size=n_target, replace=False)
    trials = [Trial(same_pairs[i][0], same_pairs[i][1], True) for i in picked]

    all_utts = [(e.utterance_id, e.speaker_id) for e in manifest.entries]
    cross_total = sum(
        len(by_speaker[a]) * len(by_speaker[b])
        for a, b in itertools.combinations(speakers, 2)
    )
    if n_nontarget > cross_total:
        raise ValueError(
            f"requested {n_nontarget} non-target trials, only {cross_total} pairs exist"
        )
    seen: set[tuple[str, str]] = set()
    while len(seen) < n_nontarget:
        i, j = rng.integers(0, len(all_utts), 2)
        (utt_a, spk_a), (utt_b, spk_b) = all_utts[int(i)], all_utts[int(j)]
        if spk_a == spk_b:
            continue
        key = (utt_a, utt_b) if utt_a < utt_b else (utt_b, utt_a)
        if key in seen:
            continue
        seen.add(key)
        trials.append(Trial(key[0], key[1], False))
    return trials


def save_trials(trials: list[Trial], path) -> None:
    lines = [f"{int(t.is_target)} {t.enroll_id} {t.test_id}" for t in trials]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3 or fields[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'is_target enroll_id test_id'")
        trials.append(Trial(fields[1], fields[2], fields[0] == "1"))
    return trials


class EmbeddingCache:
    """Extracts each utterance at most once."""

    def __init__(self, network: Network, manifest: Manifest, fbank: FbankConfig):
        self.network = network
        self.entries = manifest.by_id()
        self.fbank = fbank
        self._cache: dict[str, np.ndarray] = {}
        self.n_computed = 0

    def get(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._cache:
            if utt_id not in self.entries:
                raise KeyError(f"utterance {utt_id!r} not present in the manifest")
            wave = read_wav(self.entries[utt_id].path)
            self._cache[utt_id] = extract_embedding(self.network, wave, self.fbank)
            self.n_computed += 1
        return self._cache[utt_id]


def score_trials(
    network: Network, manifest: Manifest, trials: list[Trial], fbank: FbankConfig
) -> tuple[np.ndarray, np.ndarray, EmbeddingCache]:
    if not trials:
        raise ValueError("empty trial list")
    cache = EmbeddingCache(network, manifest, fbank)
    scores = np.array(
        [cosine_score(cache.get(t.enroll_id), cache.get(t.test_id)) for t in trials]
    )
    labels = np.array([t.is_target for t in trials], dtype=bool)
    return scores, labels, cache


def run_trials(
    network: Network,
    manifest: Manifest,
    trials: list[Trial],
    params: DcfParams,
    fbank: FbankConfig,
) -> EvalReport:
    """Score every trial with cosine similarity and compute both metrics."""
    scores, labels, cache = score_trials(network, manifest, trials, fbank)
    eer, eer_thr = compute_eer(scores, labels)
    mindcf, dcf_thr = compute_mindcf(scores, labels, params)
    return EvalReport(
        eer=eer,
        eer_threshold=eer_thr,
        mindcf=mindcf,
        mindcf_threshold=dcf_thr,
        n_trials=len(trials),
        n_target=int(labels.sum()),
        n_nontarget=int((~labels).sum()),
        n_embeddings_computed=cache.n_computed,
    )
