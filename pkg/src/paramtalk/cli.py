"""Command-line entry point: ``paramtalk <subcommand> ...``.

Progress is written to stderr as one JSON object per line. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from paramtalk import pipeline
from paramtalk.config import ConfigError, RunConfig
from paramtalk.pipeline import STAGES, StageError, classify
from paramtalk.synthdata import SynthSpec
from paramtalk.tensorio import read_json


class JsonLines(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "event": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, sort_keys=True, default=str)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLines())
    root = logging.getLogger("paramtalk")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = pipeline.with_overrides(cfg, seed=args.seed)
    return cfg


def cmd_synth(args):
    d = read_json(args.spec) if args.spec else {}
    try:
        spec = SynthSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    if args.seed is not None:
        spec = SynthSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    pipeline.run_synth(spec, args.count, Path(args.out))


def cmd_disentangle(args):
    pipeline.run_disentangle(args.original, args.edited_lip, args.edited_eye, args.k_lip, args.k_eye, args.out,
                             aggregate=args.aggregate)


def cmd_train_sync(args):
    pipeline.run_train_sync(args.data, args.partition, _config(args), args.out)


def cmd_train(args):
    pipeline.run_train(args.data, args.partition, _config(args), args.out, sync_ckpt=args.sync_ckpt)


def cmd_sample(args):
    audio = Path(args.audio)
    out = Path(args.out)
    if audio.is_dir():
        srcs = sorted(audio.glob("*.pdt")) + sorted(audio.glob("*.csv"))
        dsts = [out / f"{p.stem}.pdt" for p in srcs]
    else:
        srcs, dsts = [audio], [out]
    pipeline.run_sample(args.ckpt, srcs, dsts, args.scale, args.seed, sampler=args.sampler,
                        ddim_steps=args.ddim_steps)


def cmd_evaluate(args):
    pipeline.run_evaluate(args.generated, args.reference, args.partition, args.out, sync_ckpt=args.sync_ckpt,
                          audio_dir=args.audio, plots_dir=args.plots, fps=args.fps)


def cmd_pipeline(args):
    cfg = _config(args)
    if args.work_dir:
        cfg = pipeline.with_overrides(cfg, work_dir=args.work_dir)
    pipeline.run_pipeline(cfg, skip=tuple(args.skip or ()), force=args.force)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paramtalk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    s.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("disentangle", help="select lip/eye/global subspaces from edit pairs")
    s.add_argument("--original", required=True)
    s.add_argument("--edited-lip", required=True)
    s.add_argument("--edited-eye", required=True)
    s.add_argument("--k-lip", type=int, default=13)
    s.add_argument("--k-eye", type=int, default=8)
    s.add_argument("--aggregate", choices=("mean", "max"), default="mean",
                   help="how per-frame changes are pooled per dimension")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_disentangle)

    s = sub.add_parser("train-sync", help="pretrain the audio/lip sync encoders")
    s.add_argument("--data", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_sync)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--config")
    s.add_argument("--sync-ckpt")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate expressions for audio features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--audio", required=True, help="audio tensor file or directory of them")
    s.add_argument("--scale", type=float, default=1.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="parameter-space metrics report")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference")
    s.add_argument("--partition", required=True)
    s.add_argument("--sync-ckpt")
    s.add_argument("--audio", help="audio directory (default: <reference>/../audio)")
    s.add_argument("--fps", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--plots")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", help="synth -> disentangle -> train-sync -> train -> sample -> evaluate")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--work-dir")
    s.add_argument("--skip", nargs="*", choices=STAGES)
    s.add_argument("--force", action="store_true", help="ignore recorded stage checksums")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    log = logging.getLogger("paramtalk")
    try:
        args.func(args)
    except StageError as exc:
        log.error("failed", extra={"fields": {"stage": exc.stage, "code": exc.code, "error": str(exc.__cause__)}})
        return exc.code
    except Exception as exc:  # noqa: BLE001
        code = classify(exc)
        if code == 1:
            raise
        log.error("failed", extra={"fields": {"command": args.command, "code": code, "error": str(exc)}})
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
