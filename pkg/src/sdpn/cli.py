"""Command-line entry point: gen-data, train, extract, evaluate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import core, nn
from .checkpoint import load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    deep_merge,
    echo_config,
    load_config_dict,
    run_config_from_dict,
    run_config_to_dict,
)
from .corpus import generate_synth_corpus, load_manifest, save_manifest, split_manifest
from .evaluate import extract_embedding, load_trials, make_trials, run_trials, save_trials
from .trainer import build_networks_from_checkpoint, train
from .audio import read_wav

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(message)


def _load_run_config(args, overrides: dict) -> RunConfig:
    base = run_config_to_dict(RunConfig())
    if getattr(args, "config", None):
        base = deep_merge(base, load_config_dict(args.config))
    merged = deep_merge(base, overrides)
    return run_config_from_dict(merged)


def _set_if(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def cmd_gen_data(args) -> int:
    overrides: dict = {"corpus": {}, "trials": {}}
    _set_if(overrides["corpus"], "n_speakers", args.speakers)
    _set_if(overrides["corpus"], "utts_per_speaker", args.utts)
    _set_if(overrides["corpus"], "utt_duration_s", args.duration)
    _set_if(overrides["corpus"], "sample_rate", args.sample_rate)
    _set_if(overrides["corpus"], "seed", args.seed)
    _set_if(overrides["trials"], "n_target", args.n_target)
    _set_if(overrides["trials"], "n_nontarget", args.n_nontarget)
    _set_if(overrides["trials"], "holdout_per_speaker", args.holdout)
    cfg = _load_run_config(args, overrides)

    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    manifest = generate_synth_corpus(cfg.corpus, out_dir)
    train_m, eval_m = split_manifest(manifest, cfg.trials.holdout_per_speaker)
    save_manifest(train_m, out_dir / "train.tsv")
    save_manifest(eval_m, out_dir / "eval.tsv")
    trials = make_trials(eval_m, cfg.trials.n_target, cfg.trials.n_nontarget, cfg.corpus.seed)
    save_trials(trials, out_dir / "trials.txt")
    print(f"wrote {len(manifest)} utterances, {len(trials)} trials to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides: dict = {"train": {"augment": {}}}
    _set_if(overrides["train"], "seed", args.seed)
    _set_if(overrides["train"], "epochs", args.epochs)
    _set_if(overrides["train"], "batch_size", args.batch_size)
    _set_if(overrides["train"], "mu", args.mu)
    _set_if(overrides["train"], "peak_lr", args.peak_lr)
    if args.no_wav_aug:
        overrides["train"]["augment"]["wav_augment"] = False
    if args.no_spec_aug:
        overrides["train"]["augment"]["spec_augment"] = False
    cfg = _load_run_config(args, overrides)

    manifest = load_manifest(args.manifest)
    resume = load_checkpoint(args.resume) if args.resume else None
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    result = train(manifest, cfg.train, out_dir, resume=resume)
    counters = result.augment_stats.as_dict()
    print(f"trained {result.n_steps} steps; final checkpoint {result.final_checkpoint}")
    print("augmentation counters: " + " ".join(f"{k}={v}" for k, v in counters.items()))
    return EXIT_OK


def _load_eval_network(args):
    ckpt = load_checkpoint(args.checkpoint)
    student, teacher, cfg = build_networks_from_checkpoint(ckpt)
    network = student if getattr(args, "use_student", False) else teacher
    return network, cfg


def cmd_extract(args) -> int:
    network, cfg = _load_eval_network(args)
    manifest = load_manifest(args.manifest)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for entry in manifest:
            emb = extract_embedding(network, read_wav(entry.path), cfg.fbank)
            fh.write(entry.utterance_id + " " + " ".join(f"{v:.6e}" for v in emb) + "\n")
    print(f"wrote {len(manifest)} embeddings to {out_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    overrides: dict = {"dcf": {}}
    _set_if(overrides["dcf"], "p_target", args.p_target)
    run_cfg = _load_run_config(args, overrides)
    network, train_cfg = _load_eval_network(args)
    manifest = load_manifest(args.manifest)
    trials = load_trials(args.trials)
    report = run_trials(network, manifest, trials, run_cfg.dcf, train_cfg.fbank)
    print(report.format_text())
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(report.format_text() + "\n", encoding="utf-8")
    return EXIT_OK


GRADCHECK_TOLERANCE = 1e-4


def cmd_gradcheck(args) -> int:
    """Full-loss finite-difference check on a tiny 64-bit model."""
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    arch = nn.ArchConfig(
        n_mels=8,
        conv_channels=(8, 8),
        conv_kernels=(3, 3),
        conv_dilations=(1, 2),
        embed_dim=16,
        head_hidden=16,
        head_out=8,
        n_prototypes=16,
    )
    student = nn.Network(arch, rng, np.float64)
    teacher = nn.Network(arch, np.random.default_rng(123), np.float64)
    teacher.copy_from(student)
    prototypes = core.init_prototypes(arch.n_prototypes, arch.head_out, rng, np.float64)
    temps = core.Temperatures()
    sk = core.SinkhornConfig()

    n_utts, n_views = 4, 4
    g_feats = rng.standard_normal((n_utts, 20, arch.n_mels))
    l_feats = rng.standard_normal((n_utts * n_views, 10, arch.n_mels))
    t_emb = teacher.encoder_forward(g_feats, train=True)
    t_proj = teacher.head_forward(t_emb, train=True)
    p_tea = core.teacher_distribution(t_proj, prototypes.value, temps.tau_t, sk)

    def loss_fn():
        breakdown, graph = core._student_objective(
            l_feats, n_utts, n_views, student, prototypes, p_tea, temps.tau_s,
            mu=0.1, dr_floor=1e-4, dr_literal=False,
        )
        grads = core.backward(graph)
        return breakdown.total, grads

    worst = nn.grad_check(
        student.params() + [prototypes],
        loss_fn,
        n_probe=args.n_probe,
        eps=args.eps,
        rng=np.random.default_rng(1),
    )
    print(f"max relative gradient error: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if worst >= GRADCHECK_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_RUNTIME
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sdpn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus, splits, and trials")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--speakers", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--n-target", type=int)
    p.add_argument("--n-nontarget", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--no-wav-aug", action="store_true")
    p.add_argument("--no-spec-aug", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write one embedding row per utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-student", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score trials and print EER/minDCF")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--config")
    p.add_argument("--p-target", type=float)
    p.add_argument("--use-student", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--n-probe", type=int, default=64)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
