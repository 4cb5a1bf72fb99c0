"""Self-distillation prototypes network for speaker representations, desk scale."""

from .audio import Waveform, read_wav, write_wav
from .corpus import (
    Manifest,
    ManifestEntry,
    SynthCorpusConfig,
    generate_synth_corpus,
    load_manifest,
    save_manifest,
)
from .features import FbankConfig, compute_fbank
from .augment import AugmentConfig, AugmentStats, apply_rir, mix_noise, spec_augment
from .multicrop import CropSet, sample_multicrop
from .nn import ArchConfig, Network, grad_check
from .core import (
    LossBreakdown,
    SinkhornConfig,
    Temperatures,
    cross_entropy_loss,
    diversity_loss,
    ema_update,
    sdpn_step_forward,
    student_distribution,
    teacher_distribution,
    total_loss,
)
from .trainer import TrainConfig, lr_at, train
from .evaluate import (
    DcfParams,
    Trial,
    compute_eer,
    compute_mindcf,
    cosine_score,
    extract_embedding,
    make_trials,
    run_trials,
)

__version__ = "0.1.0"
