"""Command line entry point: synth | baseline | train | infer | eval | masks.

Failures print one line to stderr, ``error[<code>]: <message>``, where code is
``usage`` or ``config`` or ``missing`` (exit 2) or ``runtime`` (exit 1).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evalproto as E
from . import model as M
from . import training as T
from .config import ConfigError, RunConfig
from .ingest import RvidError, read_rvid
from .sigproc import write_rates_csv, write_waveform_csv
from .synth import Manifest, make_dataset


class UsageError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("usage", f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="run config JSON (sections synth, ingest, model, train, loss, eval)")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, default=default, help="seed applied to synthesis split, training and ICA")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker threads; 1 gives the bit-exact sequential path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitalformer", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="render a synthetic dataset and manifest")

    p = sub.add_parser("baseline", parents=[common], help="evaluate a classical method on a manifest")
    p.add_argument("method", choices=("green", "pos", "ica"))
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")

    p = sub.add_parser("train", parents=[common], help="train a model on the manifest's train split")
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")

    p = sub.add_parser("infer", parents=[common], help="predict a waveform and per-frame rates for one clip")
    p.add_argument("clip", help="RVID clip file")
    p.add_argument("--checkpoint", required=True, help="VTCK checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a method or checkpoint on a manifest")
    p.add_argument("method", nargs="?", choices=("green", "pos", "ica"), help="classical method (omit with --checkpoint)")
    p.add_argument("--checkpoint", help="VTCK checkpoint to evaluate")
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")

    p = sub.add_parser("masks", parents=[common], help="export site-2 attention masks as PGM + CSV")
    p.add_argument("clip", help="RVID clip file")
    p.add_argument("--checkpoint", required=True, help="VTCK checkpoint")
    p.add_argument("--frames", type=int, default=8, help="number of evenly spaced frames (default 8)")
    return parser


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError("missing", f"{what} not found: {path}")
    return p


def _resolve(args) -> tuple[RunConfig, bool]:
    """Resolved config and whether the model section was given explicitly."""
    if args.config:
        _require(args.config, "config")
        cfg = RunConfig.load(args.config)
        explicit_model = "model" in json.loads(Path(args.config).read_text())
    else:
        cfg, explicit_model = RunConfig(), False
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg, explicit_model


def _checkpoint(path, cfg: RunConfig, explicit_model: bool) -> M.ModelParams:
    _require(path, "checkpoint")
    return M.load_checkpoint(path, expect=cfg.model if explicit_model else None)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(report: E.EvalReport, rates: dict, out: Path) -> None:
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table() + "\n")
    rdir = out / "rates"
    rdir.mkdir(exist_ok=True)
    for clip_id in sorted(rates):
        write_rates_csv(rdir / f"{clip_id}_rate.csv", rates[clip_id])
    print(report.table())


def cmd_synth(args, cfg: RunConfig, explicit_model: bool) -> None:
    out = _out(args)
    s = cfg.synth
    make_dataset(s.n_clips, s.split_seed, s.dataset, out, threads=args.threads)
    cfg.write(out)
    print(out / "manifest.json")


def cmd_eval(args, cfg: RunConfig, explicit_model: bool) -> None:
    man = Manifest(_require(args.manifest, "manifest"))
    if args.command == "eval" and args.checkpoint:
        if args.method:
            raise UsageError("usage", "give either a method or --checkpoint, not both")
        params = _checkpoint(args.checkpoint, cfg, explicit_model)
        method = "model"
    elif args.method:
        params, method = None, args.method
    else:
        raise UsageError("usage", "eval needs a method or --checkpoint")
    out = _out(args)
    rates: dict = {}
    report = E.evaluate_method(method, man, cfg.eval, params, args.threads, rates)
    cfg.write(out)
    _write_report(report, rates, out)


def cmd_train(args, cfg: RunConfig, explicit_model: bool) -> None:
    man = Manifest(_require(args.manifest, "manifest"))
    records = man.load_split("train")
    if not records:
        raise ValueError(f"{man.path}: manifest has no train clips")
    out = _out(args)
    cfg.write(out)
    res = T.train(records, cfg.model, cfg.train_config(), cfg.loss, out)
    print(f"final loss {res.log[-1][1]:.6f}; checkpoint {res.checkpoint}")


def cmd_infer(args, cfg: RunConfig, explicit_model: bool) -> None:
    clip = read_rvid(_require(args.clip, "clip"))
    params = _checkpoint(args.checkpoint, cfg, explicit_model)
    out = _out(args)
    wave = M.infer_waveform(clip, params, cfg.eval.band, args.threads)
    rates = E.continuous_rates(wave, cfg.eval.band, cfg.eval.win_s, cfg.eval.stride, n_frames=clip.n_frames)
    stem = Path(args.clip).stem
    write_waveform_csv(out / f"{stem}_wave.csv", wave)
    write_rates_csv(out / f"{stem}_rate.csv", rates)
    cfg.write(out)
    print(out / f"{stem}_rate.csv")


def cmd_masks(args, cfg: RunConfig, explicit_model: bool) -> None:
    clip = read_rvid(_require(args.clip, "clip"))
    params = _checkpoint(args.checkpoint, cfg, explicit_model)
    out = _out(args)
    res = E.export_masks(clip, params, out / f"{Path(args.clip).stem}_masks", k=args.frames)
    cfg.write(out)
    print(res["pgm"])


COMMANDS = {
    "synth": cmd_synth,
    "baseline": cmd_eval,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "masks": cmd_masks,
}


def _fail(code: str, message: str) -> None:
    print(f"error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("usage", "--threads must be >= 1")
        cfg, explicit_model = _resolve(args)
        COMMANDS[args.command](args, cfg, explicit_model)
    except UsageError as exc:
        _fail(exc.code, exc)
        return 2
    except ConfigError as exc:
        _fail("config", exc)
        return 2
    except (ValueError, OSError, RvidError, T.TrainingAborted, ArithmeticError) as exc:
        _fail("runtime", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
