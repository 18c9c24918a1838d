"""Command-line entry point wiring the pipeline end to end.

Subcommands: ``synth``, ``train-tokenizer``, ``train-forecaster``,
``nowcast``, ``verify``, ``plot``. Every run writes a JSON run manifest
next to its outputs. Errors exit with a distinct code per class and print
a single machine-parsable line to stderr::

    tokencast-error class=<error_class> message="..."

Exit codes: 0 success, 1 internal error, 2 usage, 3 missing input,
4 invalid configuration, 5 incompatible checkpoints, 6 data/format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from tokencast import __version__
from tokencast.checkpoint import CheckpointError
from tokencast.config import ConfigError, load_config, save_config
from tokencast.forecaster import (
    ForecasterCheckpoint,
    ForecasterError,
    train_forecaster,
)
from tokencast.grid import PreprocessError, RadarSequence
from tokencast.inference import (
    CheckpointCompatError,
    InferenceError,
    NowcastRequest,
    Sampling,
    nowcast,
)
from tokencast.manifest import RunManifest
from tokencast.report import evaluate_ensemble, format_report, load_report, save_report, write_plots
from tokencast.rprc import RprcError, read_sequence, write_sequence
from tokencast.synthetic import generate_dataset
from tokencast.tokenizer import TokenizerCheckpoint, TokenizerError, train_tokenizer
from tokencast.verification import VerificationError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4
EXIT_CHECKPOINT_COMPAT = 5
EXIT_DATA_FORMAT = 6


def _fail(error_class: str, exc: Exception, code: int) -> int:
    message = str(exc).replace('"', "'")
    print(f'tokencast-error class={error_class} message="{message}"', file=sys.stderr)
    return code


def _parse_mode(mode: str) -> Sampling:
    if mode in ("multinomial", "greedy"):
        return Sampling(mode=mode)
    if mode.startswith("top_k:"):
        return Sampling(mode="top_k", top_k=int(mode.split(":", 1)[1]))
    if mode.startswith("temperature:"):
        return Sampling(mode="temperature", temperature=float(mode.split(":", 1)[1]))
    raise ConfigError(f"unknown sampling mode {mode!r}; use multinomial, greedy, top_k:<k> or temperature:<t>")


def _manifest_path(args) -> Path:
    return Path(getattr(args, "out"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.synth
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    t0 = time.perf_counter()
    manifest = generate_dataset(spec, args.n, args.out, cfg.split_fractions, cfg.preprocess)
    run = RunManifest(
        subcommand="synth",
        config=cfg.snapshot(),
        seed=spec.seed,
        outputs=[str(p) for p in manifest.filenames()],
        wall_clock_s=time.perf_counter() - t0,
        extra={"counts": manifest.counts()},
    )
    run.write(args.out)
    print(f"wrote {args.n} sequences to {args.out} (splits: {manifest.counts()})")
    return EXIT_OK


def _resolve_dataset(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.txt"
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def cmd_train_tokenizer(args) -> int:
    cfg = load_config(args.config)
    tok_cfg = cfg.tokenizer
    schedule = cfg.tokenizer_schedule
    if args.loss is not None:
        tok_cfg = dataclasses.replace(tok_cfg, recon_loss=args.loss)
    if args.steps is not None:
        schedule = dataclasses.replace(schedule, steps=args.steps)
    if args.seed is not None:
        schedule = dataclasses.replace(schedule, seed=args.seed)
    data = _resolve_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.with_suffix(".log.jsonl")
    t0 = time.perf_counter()
    ckpt = train_tokenizer(data, tok_cfg, schedule, log_path=log_path)
    ckpt.save(out)
    run = RunManifest(
        subcommand="train-tokenizer",
        config=cfg.snapshot(),
        seed=schedule.seed,
        outputs=[str(out), str(log_path)],
        wall_clock_s=time.perf_counter() - t0,
        extra={
            "content_hash": ckpt.content_hash(),
            "init_val_mwae": ckpt.meta["init_val_mwae"],
            "final_val_mwae": ckpt.meta["final_val_mwae"],
        },
    )
    run.add_input("dataset_manifest", data)
    run.write(out.parent)
    print(
        f"tokenizer -> {out} ({schedule.steps} steps, val MWAE "
        f"{ckpt.meta['init_val_mwae']:.5f} -> {ckpt.meta['final_val_mwae']:.5f})"
    )
    return EXIT_OK


def cmd_train_forecaster(args) -> int:
    cfg = load_config(args.config)
    fc_cfg = cfg.forecaster
    schedule = cfg.forecaster_schedule
    if args.steps is not None:
        schedule = dataclasses.replace(schedule, steps=args.steps)
    if args.seed is not None:
        schedule = dataclasses.replace(schedule, seed=args.seed)
    data = _resolve_dataset(args.data)
    tok = TokenizerCheckpoint.load(args.tokenizer)
    if fc_cfg.vocab_size != tok.config.codebook_size:
        fc_cfg = dataclasses.replace(fc_cfg, vocab_size=tok.config.codebook_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.with_suffix(".log.jsonl")
    t0 = time.perf_counter()
    ckpt = train_forecaster(data, tok, fc_cfg, schedule, log_path=log_path)
    ckpt.save(out)
    run = RunManifest(
        subcommand="train-forecaster",
        config=cfg.snapshot(),
        seed=schedule.seed,
        outputs=[str(out), str(log_path)],
        wall_clock_s=time.perf_counter() - t0,
        extra={
            "content_hash": ckpt.content_hash(),
            "tokenizer_hash": ckpt.meta["tokenizer_hash"],
            "init_val_loss": ckpt.meta["init_val_loss"],
            "final_val_loss": ckpt.meta["final_val_loss"],
        },
    )
    run.add_input("dataset_manifest", data)
    run.add_input("tokenizer", args.tokenizer)
    run.write(out.parent)
    print(
        f"forecaster -> {out} ({schedule.steps} steps, val loss "
        f"{ckpt.meta['init_val_loss']:.4f} -> {ckpt.meta['final_val_loss']:.4f})"
    )
    return EXIT_OK


def cmd_nowcast(args) -> int:
    tok = TokenizerCheckpoint.load(args.tokenizer)
    fc = ForecasterCheckpoint.load(args.forecaster)
    context_seq = read_sequence(args.context)
    need = fc.config.context_frames - 1
    if len(context_seq) < need:
        raise InferenceError(f"context file has {len(context_seq)} frames, need at least {need}")
    context = RadarSequence(
        context_seq.values[-need:],
        context_seq.timestep_minutes,
        context_seq.resolution_km,
    )
    req = NowcastRequest(
        context=context,
        lead_steps=args.steps,
        n_members=args.members,
        sampling=_parse_mode(args.mode),
        seed=args.seed,
    )
    t0 = time.perf_counter()
    result = nowcast(req, tok, fc, allow_hash_mismatch=args.allow_hash_mismatch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(result.n_members):
        p = out / f"member_{i:03d}.rprc"
        write_sequence(result.member_sequence(i), p)
        paths.append(str(p))
    run = RunManifest(
        subcommand="nowcast",
        config={
            "lead_steps": args.steps,
            "members": args.members,
            "mode": args.mode,
            "context_frames_used": need,
        },
        seed=args.seed,
        outputs=paths,
        wall_clock_s=time.perf_counter() - t0,
        extra={
            "member_seeds": [str(s) for s in result.member_seeds],
            "tokenizer_hash": tok.content_hash(),
            "forecaster_hash": fc.content_hash(),
            "wall_clock_per_step_s": result.step_seconds,
        },
    )
    run.add_input("context", args.context)
    run.add_input("tokenizer", args.tokenizer)
    run.add_input("forecaster", args.forecaster)
    run.write(out)
    print(f"wrote {result.n_members} members x {args.steps} steps to {out}")
    return EXIT_OK


def _member_paths(values: list[str]) -> list[Path]:
    paths: list[Path] = []
    for v in values:
        p = Path(v)
        if p.is_dir():
            found = sorted(p.glob("member_*.rprc"))
            if not found:
                raise FileNotFoundError(f"no member_*.rprc files in {p}")
            paths.extend(found)
        else:
            if not p.exists():
                raise FileNotFoundError(p)
            paths.append(p)
    return paths


def cmd_verify(args) -> int:
    obs = read_sequence(args.obs)
    members = [read_sequence(p) for p in _member_paths(args.members)]
    report = evaluate_ensemble(
        obs,
        members,
        crps_units=args.units,
        rank_seed=args.seed,
        wet_only=args.wet_only,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(report, out)
    print(format_report(report))
    outputs = [str(out)]
    if args.plots:
        outputs += [str(p) for p in write_plots(report, args.plots)]
    run = RunManifest(
        subcommand="verify",
        config={"units": args.units, "wet_only": args.wet_only},
        seed=args.seed,
        outputs=outputs,
        extra={"n_members": report["n_members"]},
    )
    run.add_input("obs", args.obs)
    run.write(out.parent, name="verify_manifest.json")
    return EXIT_OK


def cmd_plot(args) -> int:
    report = load_report(args.report)
    paths = write_plots(report, args.out)
    print("\n".join(str(p) for p in paths))
    run = RunManifest(subcommand="plot", config={}, outputs=[str(p) for p in paths])
    run.add_input("report", args.report)
    run.write(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencast",
        description="token-based generative radar nowcasting at desk scale",
    )
    parser.add_argument("--version", action="version", version=f"tokencast {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic radar dataset")
    p.add_argument("--config", "-c", default=None, help="YAML config file")
    p.add_argument("--n", type=int, required=True, help="number of sequences")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="base seed override")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-tokenizer", help="train the spatial tokenizer")
    p.add_argument("--data", required=True, help="dataset directory or manifest.txt")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", choices=("mwae", "mae"), default=None, help="reconstruction loss override")
    p.add_argument("--log", default=None, help="training log path (jsonl)")
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train-forecaster", help="train the token forecaster")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True, help="trained tokenizer checkpoint")
    p.add_argument("--config", "-c", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_forecaster)

    p = sub.add_parser("nowcast", help="generate an ensemble nowcast")
    p.add_argument("--context", required=True, help="RPRC file; the last T-1 frames are used")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--forecaster", required=True)
    p.add_argument("--steps", type=int, default=1, help="lead steps to generate")
    p.add_argument("--members", type=int, default=1)
    p.add_argument("--mode", default="multinomial", help="multinomial | greedy | top_k:<k> | temperature:<t>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(func=cmd_nowcast)

    p = sub.add_parser("verify", help="score members against observations")
    p.add_argument("--obs", required=True, help="RPRC file with the verification frames")
    p.add_argument("--members", nargs="+", required=True, help="member RPRC files or a directory")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--plots", default=None, help="directory for figures")
    p.add_argument("--units", choices=("dbz", "mmh"), default="dbz", help="CRPS/rank units")
    p.add_argument("--wet-only", action="store_true", help="rank histogram over wet pixels only")
    p.add_argument("--seed", type=int, default=0, help="rank tie-break seed")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="draw figures from a verify report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("write-config", help="write the default config to a file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda a: (save_config(load_config(None), a.out), print(f"wrote {a.out}"))[1] or EXIT_OK)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing_input", exc, EXIT_MISSING_INPUT)
    except ConfigError as exc:
        return _fail("config_invalid", exc, EXIT_CONFIG)
    except CheckpointCompatError as exc:
        return _fail("checkpoint_incompat", exc, EXIT_CHECKPOINT_COMPAT)
    except (
        RprcError,
        CheckpointError,
        TokenizerError,
        ForecasterError,
        InferenceError,
        VerificationError,
        PreprocessError,
    ) as exc:
        return _fail("data_format", exc, EXIT_DATA_FORMAT)
    except Exception as exc:  # pragma: no cover - safety net
        return _fail("internal", exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
