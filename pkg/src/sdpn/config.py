"""Run configuration: defaults, JSON config files, and override merging."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .augment import AugmentConfig
from .corpus import SynthCorpusConfig
from .evaluate import DcfParams
from .features import FbankConfig
from .nn import ArchConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """Invalid or unknown configuration input."""


@dataclass
class TrialSpec:
    n_target: int = 200
    n_nontarget: int = 200
    holdout_per_speaker: int = 5


@dataclass
class RunConfig:
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dcf: DcfParams = field(default_factory=DcfParams)
    trials: TrialSpec = field(default_factory=TrialSpec)


def _check_keys(data: dict, cls, what: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")


def _build(cls, data: dict, what: str, tuple_fields: tuple[str, ...] = ()):
    _check_keys(data, cls, what)
    kwargs = dict(data)
    for name in tuple_fields:
        if name in kwargs and kwargs[name] is not None:
            kwargs[name] = tuple(kwargs[name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def arch_from_dict(d: dict) -> ArchConfig:
    return _build(ArchConfig, d, "arch", ("conv_channels", "conv_kernels", "conv_dilations"))


def fbank_from_dict(d: dict) -> FbankConfig:
    return _build(FbankConfig, d, "fbank")


def augment_from_dict(d: dict) -> AugmentConfig:
    return _build(AugmentConfig, d, "augment", ("snr_range_db",))


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    nested = {
        "arch": arch_from_dict(d.pop("arch", {})),
        "fbank": fbank_from_dict(d.pop("fbank", {})),
        "augment": augment_from_dict(d.pop("augment", {})),
    }
    cfg = _build(TrainConfig, d, "train")
    return dataclasses.replace(cfg, **nested)


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    _check_keys(d, RunConfig, "run")
    return RunConfig(
        corpus=_build(SynthCorpusConfig, d.get("corpus", {}), "corpus"),
        train=train_config_from_dict(d.get("train", {})),
        dcf=_build(DcfParams, d.get("dcf", {}), "dcf"),
        trials=_build(TrialSpec, d.get("trials", {}), "trials"),
    )


def deep_merge(base: dict, override: dict) -> dict:
    """Nested dict merge; override wins at leaves."""
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config_dict(spec: str) -> dict:
    """Read a JSON config file; bundled presets resolve by bare name."""
    path = Path(spec)
    if not path.exists():
        preset = resources.files("sdpn") / "configs" / f"{spec}.json"
        if preset.is_file():
            return json.loads(preset.read_text(encoding="utf-8"))
        raise ConfigError(f"config file not found: {spec}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: invalid JSON: {exc}") from exc


def run_config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def echo_config(cfg: RunConfig, out_dir) -> None:
    """Write the effective configuration next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config-used.json").write_text(
        json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
