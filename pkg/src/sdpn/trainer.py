"""Training loop: schedules, step orchestration, metrics log, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import read_wav
from .augment import AugmentConfig, AugmentStats, NoiseSource, RirSource
from .checkpoint import Checkpoint, save_checkpoint
from .core import (
    SinkhornConfig,
    Temperatures,
    backward,
    ema_update,
    init_prototypes,
    sdpn_step_forward,
)
from .corpus import Manifest
from .features import FbankConfig
from .multicrop import sample_multicrop
from .nn import ArchConfig, Network, Param
from .optim import SgdOptimizer

PAPER_EPOCHS = 150
PAPER_WARMUP_EPOCHS = 10


class TrainingDivergedError(Exception):
    """Loss went non-finite; a diagnostic dump was written."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    peak_lr: float = 0.4
    final_lr: float = 1e-5
    # None -> paper warmup scaled proportionally: 10 * epochs / 150
    warmup_epochs: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-5
    mu: float = 0.1
    ema_momentum_start: float = 0.996
    ema_momentum_end: float = 1.0
    tau_t: float = 0.04
    tau_s: float = 0.1
    sinkhorn_iters: int = 3
    dr_floor: float = 1e-4
    dr_literal: bool = False
    seed: int = 0
    dtype: str = "float32"
    arch: ArchConfig = field(default_factory=ArchConfig)
    fbank: FbankConfig = field(default_factory=FbankConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.resolved_warmup_epochs >= self.epochs:
            raise ValueError("warmup must end before training does")
        if not self.peak_lr > self.final_lr >= 0:
            raise ValueError("need peak_lr > final_lr >= 0")
        if not 0 <= self.ema_momentum_start <= self.ema_momentum_end <= 1:
            raise ValueError("EMA momentum schedule must be nondecreasing within [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def resolved_warmup_epochs(self) -> float:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return PAPER_WARMUP_EPOCHS * self.epochs / PAPER_EPOCHS

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def temperatures(self) -> Temperatures:
        return Temperatures(self.tau_t, self.tau_s)

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(n_iters=self.sinkhorn_iters)


def lr_at(epoch_frac: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to peak_lr, then cosine decay to final_lr."""
    if not 0 <= epoch_frac <= config.epochs:
        raise ValueError(f"epoch_frac {epoch_frac} outside [0, {config.epochs}]")
    warmup = config.resolved_warmup_epochs
    if warmup > 0 and epoch_frac < warmup:
        return config.peak_lr * epoch_frac / warmup
    span = config.epochs - warmup
    progress = (epoch_frac - warmup) / span
    return config.final_lr + (config.peak_lr - config.final_lr) * (
        1.0 + math.cos(math.pi * progress)
    ) / 2.0


def ema_momentum_at(step: int, total_steps: int, m_start: float, m_end: float) -> float:
    """Cosine ramp from m_start at step 0 to m_end at the final step."""
    t = step / max(total_steps - 1, 1)
    return m_end - (m_end - m_start) * (1.0 + math.cos(math.pi * min(t, 1.0))) / 2.0


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    m_ema: float
    l_ce: float
    l_dr: float
    total: float
    wall_ms: float


METRIC_FIELDS = ("step", "epoch", "lr", "m_ema", "l_ce", "l_dr", "total", "wall_ms")


class MetricsLog:
    """Append-only key=value records, one line per training step."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def append(self, record: StepRecord) -> None:
        parts = [f"{k}={getattr(record, k)!r}" for k in METRIC_FIELDS]
        self._fh.write(" ".join(parts) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    """Parse a metrics log back into one dict per step."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = {}
        for part in line.split():
            key, value = part.split("=", 1)
            rec[key] = json.loads(value)
        records.append(rec)
    return records


@dataclass
class TrainState:
    student: Network
    teacher: Network
    prototypes: Param
    optimizer: SgdOptimizer
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    augment_stats: AugmentStats
    n_steps: int


def _build_state(config: TrainConfig) -> TrainState:
    dtype = config.np_dtype
    student = Network(config.arch, np.random.default_rng([config.seed, 10]), dtype)
    teacher = Network(config.arch, np.random.default_rng([config.seed, 11]), dtype)
    teacher.copy_from(student)  # teacher starts as an exact copy
    prototypes = init_prototypes(
        config.arch.n_prototypes, config.arch.head_out, np.random.default_rng([config.seed, 12]), dtype
    )
    optimizer = SgdOptimizer(
        student.params() + [prototypes], config.momentum, config.weight_decay
    )
    rng = np.random.default_rng([config.seed, 13])
    return TrainState(student, teacher, prototypes, optimizer, rng)


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for p in state.student.params():
        tensors[f"student.{p.name}"] = p.value
    for name, arr in state.student.state().items():
        tensors[f"student.{name}"] = arr
    for p in state.teacher.params():
        tensors[f"teacher.{p.name}"] = p.value
    for name, arr in state.teacher.state().items():
        tensors[f"teacher.{name}"] = arr
    tensors["prototypes"] = state.prototypes.value
    for name, v in state.optimizer.velocities.items():
        tensors[f"velocity.{name}"] = v
    return tensors


def _make_checkpoint(state: TrainState, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        step=state.step,
        epoch=state.epoch,
        tensors={k: v.copy() for k, v in _state_tensors(state).items()},
        rng_state=state.rng.bit_generator.state,
        config=dataclasses.asdict(config),
    )


def restore_state(config: TrainConfig, ckpt: Checkpoint) -> TrainState:
    state = _build_state(config)
    for name, arr in _state_tensors(state).items():
        arr[...] = ckpt.tensors[name]
    state.rng.bit_generator.state = ckpt.rng_state
    state.epoch = ckpt.epoch
    state.step = ckpt.step
    return state


def build_networks_from_checkpoint(ckpt: Checkpoint) -> tuple[Network, Network, TrainConfig]:
    """Rebuild (student, teacher) in eval-ready form from a checkpoint."""
    from .config import train_config_from_dict

    config = train_config_from_dict(ckpt.config)
    state = restore_state(config, ckpt)
    return state.student, state.teacher, config


def train(
    manifest: Manifest,
    config: TrainConfig,
    out_dir,
    resume: Checkpoint | None = None,
    on_step: Callable[[StepRecord, object], None] | None = None,
) -> TrainResult:
    """Run the full optimization loop over the manifest.

    Deterministic for a fixed (manifest bytes, config, seed): shuffling uses
    one master generator whose state is checkpointed; per-utterance crop
    randomness is keyed on (seed, epoch, utterance index).
    """
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    if config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 (diversity term needs pairs)")
    steps_per_epoch = len(manifest) // config.batch_size
    if steps_per_epoch == 0:
        raise ValueError(
            f"manifest of {len(manifest)} utterances is smaller than one batch ({config.batch_size})"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = restore_state(config, resume) if resume is not None else _build_state(config)
    temps = config.temperatures()
    sk = config.sinkhorn()
    total_steps = config.epochs * steps_per_epoch
    entries = manifest.entries
    sample_rate = read_wav(entries[0].path).sample_rate
    noise_source = NoiseSource(config.augment.noise_source, sample_rate)
    rir_source = RirSource(config.augment.rir_source, sample_rate)
    stats = AugmentStats()
    metrics = MetricsLog(out_dir / "metrics.log")
    last_ckpt = None

    try:
        for epoch in range(state.epoch, config.epochs):
            order = state.rng.permutation(len(entries))
            for b in range(steps_per_epoch):
                t0 = time.perf_counter()
                batch = [int(i) for i in order[b * config.batch_size : (b + 1) * config.batch_size]]
                crops = []
                for i in batch:
                    entry = entries[i]
                    wave = read_wav(entry.path)
                    crop_rng = np.random.default_rng([config.seed, 20, epoch, i])
                    crops.append(
                        sample_multicrop(
                            wave,
                            config.augment,
                            config.fbank,
                            crop_rng,
                            utterance_id=entry.utterance_id,
                            noise_source=noise_source,
                            rir_source=rir_source,
                            stats=stats,
                            dtype=config.np_dtype,
                        )
                    )
                epoch_frac = epoch + b / steps_per_epoch
                lr = lr_at(epoch_frac, config)
                m = ema_momentum_at(
                    state.step, total_steps, config.ema_momentum_start, config.ema_momentum_end
                )
                breakdown, graph = sdpn_step_forward(
                    crops,
                    state.student,
                    state.teacher,
                    state.prototypes,
                    temps,
                    sk,
                    config.mu,
                    config.dr_floor,
                    config.dr_literal,
                )
                if not np.isfinite(breakdown.total):
                    dump = {
                        "step": state.step,
                        "epoch": epoch,
                        "utterance_ids": [entries[i].utterance_id for i in batch],
                        "l_ce": breakdown.l_ce,
                        "l_dr": breakdown.l_dr,
                    }
                    (out_dir / "diverged.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingDivergedError(
                        f"non-finite loss at step {state.step}; batch dumped to diverged.json"
                    )
                grads = backward(graph)
                state.optimizer.step(grads, lr)
                ema_update(state.teacher, state.student, m)
                record = StepRecord(
                    step=state.step,
                    epoch=epoch,
                    lr=lr,
                    m_ema=m,
                    l_ce=breakdown.l_ce,
                    l_dr=breakdown.l_dr,
                    total=breakdown.total,
                    wall_ms=(time.perf_counter() - t0) * 1000.0,
                )
                metrics.append(record)
                if on_step is not None:
                    on_step(record, graph)
                state.step += 1
            state.epoch = epoch + 1
            last_ckpt = out_dir / f"ckpt-epoch{state.epoch:04d}.bin"
            save_checkpoint(_make_checkpoint(state, config), last_ckpt)
    finally:
        metrics.close()

    (out_dir / "augment_stats.json").write_text(json.dumps(stats.as_dict(), indent=2))
    return TrainResult(
        final_checkpoint=last_ckpt,
        metrics_path=out_dir / "metrics.log",
        augment_stats=stats,
        n_steps=state.step,
    )
