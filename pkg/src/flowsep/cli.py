"""``flowsep`` command line: train, separate, evaluate, nll.

Exit codes: 0 success, 1 user/config error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from flowsep import __version__
from flowsep.audio import load_manifest, load_wav, resample, save_wav
from flowsep.errors import FlowsepError, NumericError
from flowsep.flow.checkpoint import CheckpointError, file_digest, load_model, payload_digest
from flowsep.separation import SeparationConfig, separate, write_trace
from flowsep.training import TrainConfig, train

log = logging.getLogger("flowsep")

SEED_ENV = "FLOWSEP_SEED"


class UsageError(FlowsepError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    command: str
    seed: int
    workers: int = 1
    train: dict = field(default_factory=dict)
    separation: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "workers": self.workers,
                "train": self.train, "separation": self.separation, "paths": self.paths,
                "checkpoints": self.checkpoints, "version": __version__}

    def header(self) -> str:
        """One-line CSV comment carrying the full resolved configuration."""
        return "# provenance: " + json.dumps(self.to_dict(), sort_keys=True) + "\n"


def _read_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"--config: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON in {path}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("--config: top level must be a JSON object")
    return cfg


def _resolve_seed(args, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    return 0


def _overrides(args, mapping: dict) -> dict:
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


TRAIN_FLAGS = {"epochs": "epochs", "lr": "learning_rate", "batch_size": "batch_size",
               "segment_seconds": "segment_seconds", "rms_floor_db": "rms_floor_db",
               "checkpoint_interval": "checkpoint_interval", "max_steps": "max_steps",
               "sample_rate": "sample_rate", "fft_size": "fft_size", "hop": "hop",
               "n_steps": "n_steps", "hidden": "hidden", "depth": "depth", "kernel": "kernel",
               "actnorm_floor": "actnorm_floor", "clip_grad_norm": "clip_grad_norm"}

SEPARATION_FLAGS = {"mode": "mode", "gamma": "gamma", "iterations": "iterations", "sep_lr": "learning_rate",
                    "chunk_seconds": "chunk_seconds", "eps": "epsilon_floor", "soft_mask": "soft_mask"}


def _model_list(value: Optional[str]) -> list:
    if not value:
        raise UsageError("--models: at least one checkpoint path is required")
    paths = [p for p in value.split(",") if p]
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"--models: checkpoint not found: {p}")
    return paths


def _load_models(paths: list):
    models, digests = [], {}
    for p in paths:
        try:
            model, _, _ = load_model(p)
        except CheckpointError as exc:
            raise UsageError(f"--models: {exc}")
        models.append(model)
        digests[p] = file_digest(p)
    return models, digests


def _unique_names(models) -> list:
    names, seen = [], {}
    for i, m in enumerate(models):
        base = str(m.metadata.get("instrument", f"source{i}")).replace(os.sep, "_")
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names


def cmd_train(args) -> int:
    if not args.manifest:
        raise UsageError("--manifest is required")
    if not Path(args.manifest).is_file():
        raise UsageError(f"--manifest: file not found: {args.manifest}")
    if not args.instrument:
        raise UsageError("--instrument is required")
    file_cfg = _read_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    values = {**file_cfg.get("train", {}), **_overrides(args, TRAIN_FLAGS), "seed": seed}
    try:
        config = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}")
    run = RunConfig("train", seed, train=config.to_dict(),
                    paths={"manifest": str(args.manifest), "out": str(args.out),
                           "resume": str(args.resume) if args.resume else None})
    manifest = load_manifest(args.manifest)
    path = train(config, manifest, args.instrument, args.out, resume=args.resume,
                 provenance=run.to_dict(), loss_header=run.header())
    print(f"wrote {path} (payload sha256 {payload_digest(path)[:16]})")
    return 0


def _separation_config(args, file_cfg: dict, seed: int) -> SeparationConfig:
    values = {**file_cfg.get("separation", {}), **_overrides(args, SEPARATION_FLAGS), "seed": seed}
    values["workers"] = args.workers or int(file_cfg.get("workers", 1))
    try:
        return SeparationConfig(**values)
    except TypeError as exc:
        raise UsageError(f"invalid separation config: {exc}")


def cmd_separate(args) -> int:
    if not args.mixture:
        raise UsageError("--mixture is required")
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    file_cfg = _read_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    paths = _model_list(args.models)
    config = _separation_config(args, file_cfg, seed)
    if config.mode == "mle" and args.gamma:
        print(f"warning: --gamma {args.gamma} is ignored with --mode mle; recording gamma=0", file=sys.stderr)
    models, digests = _load_models(paths)
    mixture = load_wav(args.mixture)
    stft = models[0].metadata.get("stft", {})
    if stft.get("sample_rate") and mixture.sample_rate != stft["sample_rate"]:
        mixture = resample(mixture, stft["sample_rate"])

    result = separate(mixture, models, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _unique_names(models)
    run = RunConfig("separate", seed, config.workers, separation=config.to_dict(),
                    paths={"mixture": str(args.mixture), "models": paths, "out_dir": str(out)},
                    checkpoints=digests)
    stems = {}
    for name, stem in zip(names, result.stems):
        p = out / f"{name}.wav"
        save_wav(stem, p, args.encoding)
        stems[name] = {"path": str(p), "sha256": file_digest(p), "samples": len(stem)}
    write_trace(out / "trace.csv", result, names, header=run.header())
    provenance = {**run.to_dict(), "stems": stems, "trace_sha256": file_digest(out / "trace.csv"),
                  "seconds_per_iteration": result.seconds_per_iteration}
    with open(out / "provenance.json", "w") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
    final = result.final_report
    if final is not None:
        print(f"final objective {final.total:.6g} (kl {final.kl_term:.6g}); stems in {out}")
    return 0


def cmd_evaluate(args) -> int:
    from flowsep.evaluation import evaluate_tracks, format_db, load_test_manifest

    if not args.test_manifest:
        raise UsageError("--test-manifest is required")
    if not Path(args.test_manifest).is_file():
        raise UsageError(f"--test-manifest: file not found: {args.test_manifest}")
    tracks = load_test_manifest(args.test_manifest)
    if not tracks:
        raise UsageError("--test-manifest lists no tracks")
    file_cfg = _read_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    config = _separation_config(args, file_cfg, seed)
    if args.oracle:
        models, digests, paths = [], {}, []
    else:
        paths = _model_list(args.models)
        models, digests = _load_models(paths)
    report = evaluate_tracks(tracks, models, config, args.segment_seconds, oracle=args.oracle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig("evaluate", seed, config.workers, separation=config.to_dict(),
                    paths={"test_manifest": str(args.test_manifest), "models": paths, "out": str(out),
                           "oracle": bool(args.oracle), "segment_seconds": args.segment_seconds},
                    checkpoints=digests)
    report.write_csv(out / "sdr_report.csv", header=run.header())
    print(report.summary_table())
    excluded = report.excluded
    if excluded:
        print(f"excluded {len(excluded)} silent segment(s)")
    return 0


def cmd_nll(args) -> int:
    from flowsep.evaluation import nll_matrix

    if not args.clips_manifest:
        raise UsageError("--clips-manifest is required")
    if not Path(args.clips_manifest).is_file():
        raise UsageError(f"--clips-manifest: file not found: {args.clips_manifest}")
    paths = _model_list(args.models)
    models, digests = _load_models(paths)
    file_cfg = _read_config_file(args.config)
    seed = _resolve_seed(args, file_cfg)
    matrix = nll_matrix(models, load_manifest(args.clips_manifest), args.clip_seconds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig("nll", seed, paths={"clips_manifest": str(args.clips_manifest), "models": paths,
                                        "out": str(out), "clip_seconds": args.clip_seconds},
                    checkpoints=digests)
    matrix.write_csv(out / "nll_matrix.csv", header=run.header())
    matrix.write_summary(out / "nll_summary.csv", header=run.header())
    width = max(len(m) for m in matrix.models)
    print(f"{'model':<{width}}  {'category':<12} {'q1':>9} {'median':>9} {'q3':>9}")
    for r in matrix.summary():
        print(f"{r['model']:<{width}}  {r['category']:<12} {r['q1']:9.4f} {r['median']:9.4f} {r['q3']:9.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowsep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")

    p = sub.add_parser("train", help="train one instrument prior")
    common(p)
    p.add_argument("--manifest", help="JSON {instrument: [wav paths]}")
    p.add_argument("--instrument")
    p.add_argument("--out", default="checkpoints")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--rms-floor-db", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--clip-grad-norm", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--fft-size", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--actnorm-floor", type=float)
    p.set_defaults(func=cmd_train)

    def separation_flags(p):
        p.add_argument("--mode", choices=["mle", "map"])
        p.add_argument("--gamma", type=float)
        p.add_argument("--iterations", type=int)
        p.add_argument("--sep-lr", type=float, help="latent Adam learning rate")
        p.add_argument("--chunk-seconds", type=float)
        p.add_argument("--eps", type=float, help="KL floor")
        p.add_argument("--soft-mask", action="store_true", default=None)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("separate", help="separate a mixture with trained priors")
    common(p)
    p.add_argument("--mixture")
    p.add_argument("--models", help="comma-separated checkpoint paths")
    p.add_argument("--out-dir")
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    separation_flags(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="global SDR over a test manifest")
    common(p)
    p.add_argument("--test-manifest")
    p.add_argument("--models")
    p.add_argument("--out", default="eval")
    p.add_argument("--segment-seconds", type=float, default=60.0)
    p.add_argument("--oracle", action="store_true", help="score reference stems against themselves")
    separation_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("nll", help="cross-instrument NLL matrix")
    common(p)
    p.add_argument("--models")
    p.add_argument("--clips-manifest", help="JSON {category: [wav paths]}")
    p.add_argument("--out", default="nll")
    p.add_argument("--clip-seconds", type=float, default=60.0)
    p.set_defaults(func=cmd_nll)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"flowsep {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FlowsepError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"flowsep {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
