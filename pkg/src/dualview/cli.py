"""Command-line entry point: ``dualview <stage> [flags]``.

Every stage accepts ``--config file.json``; keys are flag names with dashes
replaced by underscores, and explicit flags win over the file. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .denoiser import CheckpointError, TrainConfig
from .encoding import ThirdChannelMode
from .imageio import NetpbmError
from .metrics import DegenerateHistogramError
from .phantom import SpecRanges
from .pipeline import (
    PipelineError, RunConfig, cmd_evaluate, cmd_phantoms, cmd_preprocess, cmd_report, cmd_sample,
    cmd_train, reference_from_phantoms, run_pipeline,
)

log = logging.getLogger("dualview")

# per-command defaults; None marks a required option
_TRAIN_DEFAULTS = {
    "lr": 1e-5, "batch_size": 16, "epochs": 100, "image_size": 64, "seed": 0, "T": 200,
    "beta_start": 1e-4, "beta_end": 0.02, "sigma_kind": "beta", "mode": "absdiff",
    "checkpoint_epochs": "10,20,50,70",
}
DEFAULTS = {
    "phantoms": {"out": None, "n": 100, "seed": 0, "image_size": 64, "artifact_rate": 0.06},
    "preprocess": {"data": None, "out": None, "mode": "absdiff", "reference": None},
    "train": {"corpus": None, "out": None, "resume": None, **_TRAIN_DEFAULTS},
    "sample": {"checkpoint": None, "out": None, "n": 200, "seed": 0, "batch": 25},
    "evaluate": {"real": None, "synth": None, "out": None, "keep_largest": True, "label": None,
                 "reference": None},
    "report": {"eval": None, "out": None},
    "run": {"out": None, "n_train": 1000, "n_real": 500, "n_synth": 200, "phantom_seed": 1,
            "heldout_seed": 2, "sample_seed": 0, "sample_batch": 25, "keep_largest": True,
            "artifact_rate": 0.06, **_TRAIN_DEFAULTS, "epochs": 10},
    "build-reference": {"out": None, "n": 50, "seed": 20231, "image_size": 64},
}


def _train_flags(p):
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--image-size", type=int, help="square size in pixels, multiple of 4")
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=int, help="diffusion steps")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--sigma-kind", choices=["beta", "posterior", "zero"])
    p.add_argument("--mode", choices=[m.value for m in ThirdChannelMode], help="third-channel mode")
    p.add_argument("--checkpoint-epochs", help="comma-separated epochs to checkpoint at")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualview", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON file with default flag values")
        return p

    p = add("phantoms", "generate a synthetic dual-view phantom dataset")
    p.add_argument("--out", type=Path)
    p.add_argument("--n", type=int, help="number of pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--artifact-rate", type=float)

    p = add("preprocess", "normalize, mirror, histogram-match and encode pairs as RGB")
    p.add_argument("--data", type=Path, help="phantom dataset directory")
    p.add_argument("--out", type=Path)
    p.add_argument("--mode", choices=[m.value for m in ThirdChannelMode])
    p.add_argument("--reference", type=Path, help="reference CDF JSON (default: bundled)")

    p = add("train", "train the denoiser on an encoded corpus")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _train_flags(p)

    p = add("sample", "generate synthetic pairs from a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)

    p = add("evaluate", "score real and synthetic pairs and compare distributions")
    p.add_argument("--real", type=Path, help="phantom dataset or encoded corpus")
    p.add_argument("--synth", type=Path, help="sample directory or encoded corpus")
    p.add_argument("--out", type=Path)
    p.add_argument("--keep-largest", action=argparse.BooleanOptionalAction)
    p.add_argument("--label", help="row label for the synthetic corpus")
    p.add_argument("--reference", type=Path)

    p = add("report", "merge evaluation directories into one summary")
    p.add_argument("--eval", action="append", metavar="LABEL=DIR",
                   help="evaluation directory, repeatable")
    p.add_argument("--out", type=Path)

    p = add("run", "all stages for one third-channel mode")
    p.add_argument("--out", type=Path, help="run directory")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-real", type=int)
    p.add_argument("--n-synth", type=int)
    p.add_argument("--phantom-seed", type=int)
    p.add_argument("--heldout-seed", type=int)
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--sample-batch", type=int)
    p.add_argument("--keep-largest", action=argparse.BooleanOptionalAction)
    p.add_argument("--artifact-rate", type=float)
    _train_flags(p)

    p = add("build-reference", "build a reference CDF JSON from phantom views")
    p.add_argument("--out", type=Path)
    p.add_argument("--n", type=int, help="number of pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    return parser


def resolve(parser, args) -> dict:
    """Merge built-in defaults, the --config file and explicit flags."""
    opts = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            file_opts = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_opts, dict):
            parser.error("config file must hold a JSON object")
        unknown = set(file_opts) - set(opts)
        if unknown:
            parser.error(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        opts.update(file_opts)
    for k, v in vars(args).items():
        if k in opts and v is not None:
            opts[k] = v
    missing = [k for k, v in opts.items() if v is None and k not in ("resume", "label", "reference")]
    if missing:
        parser.error(f"{args.command}: missing required option(s): "
                     + ", ".join("--" + k.replace("_", "-") for k in missing))
    for k in ("out", "data", "corpus", "checkpoint", "real", "synth", "resume", "reference"):
        if opts.get(k) is not None:
            opts[k] = Path(opts[k])
    return opts


def _train_config(parser, o) -> TrainConfig:
    epochs = o["checkpoint_epochs"]
    try:
        if isinstance(epochs, str):
            epochs = [int(e) for e in epochs.split(",") if e.strip()]
        return TrainConfig(learning_rate=o["lr"], batch_size=o["batch_size"], epochs=o["epochs"],
                           image_size=o["image_size"], seed=o["seed"], T=o["T"],
                           beta_start=o["beta_start"], beta_end=o["beta_end"],
                           sigma_kind=o["sigma_kind"],
                           third_channel_mode=ThirdChannelMode(o["mode"]).value,
                           checkpoint_epochs=tuple(epochs))
    except ValueError as exc:
        parser.error(str(exc))


def _eval_dirs(parser, specs) -> list[tuple[str, Path]]:
    out = []
    for s in specs:
        if "=" in s:
            label, d = s.split("=", 1)
        else:
            label, d = Path(s).name, s
        out.append((label, Path(d)))
    return out


def dispatch(parser, args) -> None:
    o = resolve(parser, args)
    cmd = args.command
    if cmd == "phantoms":
        cmd_phantoms(o["out"], o["n"], o["seed"], o["image_size"], o["artifact_rate"])
    elif cmd == "preprocess":
        cmd_preprocess(o["data"], o["out"], ThirdChannelMode(o["mode"]), o["reference"])
    elif cmd == "train":
        cmd_train(o["corpus"], o["out"], _train_config(parser, o), o["resume"])
    elif cmd == "sample":
        cmd_sample(o["checkpoint"], o["out"], o["n"], o["seed"], o["batch"])
    elif cmd == "evaluate":
        cmd_evaluate(o["real"], o["synth"], o["out"], o["keep_largest"], o["label"], o["reference"])
    elif cmd == "report":
        cmd_report(_eval_dirs(parser, o["eval"]), o["out"])
    elif cmd == "run":
        try:
            cfg = RunConfig(train=_train_config(parser, o), n_train=o["n_train"], n_real=o["n_real"],
                            n_synth=o["n_synth"], phantom_seed=o["phantom_seed"],
                            heldout_seed=o["heldout_seed"], sample_seed=o["sample_seed"],
                            sample_batch=o["sample_batch"], keep_largest=o["keep_largest"],
                            artifact_rate=o["artifact_rate"])
        except ValueError as exc:
            parser.error(str(exc))
        run_pipeline(o["out"], cfg)
    elif cmd == "build-reference":
        ranges = dataclasses.replace(SpecRanges(), image_size=o["image_size"])
        ref = reference_from_phantoms(o["n"], o["seed"], ranges)
        o["out"].parent.mkdir(parents=True, exist_ok=True)
        ref.save(o["out"])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(parser, args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (PipelineError, CheckpointError, NetpbmError, DegenerateHistogramError, OSError,
            ValueError) as exc:
        print(f"dualview {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
