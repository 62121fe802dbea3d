"""Command line entry point: prepare, train-seg, train-reg, evaluate, visualize.

Option precedence is command-line flag, then ``--config`` JSON file, then
built-in default. Every run writes ``config_resolved.json`` next to its
outputs; passing that file back via ``--config`` repeats the run.

Errors are reported as one JSON line on stderr. Exit codes: 0 success,
2 usage, 3 data, 4 runtime or training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from .criteria import REG_TERMS
from .dataset import AugmentationConfig, DataError, PreprocessConfig, load_records, prepare_dataset
from .evaluation import (
    EvaluationError, evaluate_regression, evaluate_segmentation, gradcam_heatmap, render_overlay,
)
from .landmarks import ANGLE_NAMES, LandmarkError
from .morphology import MAP_NAMES, synthesize_maps
from .networks import INPUT_CHANNELS, ConfigError, RegNetConfig, SegNetConfig, model_from_checkpoint
from .training import TrainConfig, TrainingError, assemble_inputs, normalize_image, train_regression, train_segmentation

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
SNAPSHOT = "config_resolved.json"
MAP_MODES = {"predicted": "predicted", "gt": "ground_truth"}

log = logging.getLogger("spinemorph")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _name_list(allowed, required=()):
    def parse(text):
        names = tuple(t.strip() for t in text.split(",") if t.strip())
        bad = [n for n in names if n not in allowed]
        if bad or not names:
            raise argparse.ArgumentTypeError(f"expected a comma list from {','.join(allowed)}, got {text!r}")
        missing = [r for r in required if r not in names]
        if missing:
            raise argparse.ArgumentTypeError(f"{','.join(missing)} must be included")
        return tuple(n for n in allowed if n in names)
    return parse


# defaults per subcommand; argparse itself never fills defaults so explicit flags can be told apart
DEFAULTS = {
    "prepare": dict(height=512, width=256, margin=0.10, no_equalize=False, dilation=5),
    "train-seg": dict(height=512, width=256, margin=0.10, no_equalize=False, dilation=5,
                      epochs=400, lr=1e-4, batch=16, seed=0, deterministic=False, no_augment=False,
                      val_fraction=0.1, seg_losses=("dice", "boundary"), base_width=64, flip_prob=0.5),
    "train-reg": dict(height=512, width=256, margin=0.10, no_equalize=False, dilation=5,
                      epochs=1200, lr=1e-5, batch=16, seed=0, deterministic=False, no_augment=False,
                      val_fraction=0.1, maps="predicted", inputs=INPUT_CHANNELS, losses=REG_TERMS,
                      width_mult=1.4, depth_mult=1.8, dropout=0.4, seg_ckpt=None, init_weights=None,
                      flip_prob=0.5),
    "evaluate": dict(height=512, width=256, margin=0.10, no_equalize=False, dilation=5,
                     split="test", seg_ckpt=None, reg_ckpt=None, maps="predicted", threshold=0.5, dump=None),
    "visualize": dict(height=512, width=256, margin=0.10, no_equalize=False, dilation=5,
                      mode="overlay", target="mt", channel="region", seg_ckpt=None, reg_ckpt=None,
                      maps="predicted", threshold=0.5),
}
REQUIRED = {
    "prepare": ("manifest", "out"),
    "train-seg": ("manifest", "out"),
    "train-reg": ("manifest", "out"),
    "evaluate": ("manifest", "out"),
    "visualize": ("manifest", "sample", "out"),
}


def _add_preprocess(p):
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--no-equalize", action="store_true")
    p.add_argument("--dilation", type=int, help="square dilation kernel for centerline/boundary maps")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--val-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spinemorph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--manifest")
        p.add_argument("--out")
        _add_preprocess(p)
        return p

    command("prepare", "preprocess a manifest and write morphology maps")

    p = command("train-seg", "train the segmentation network")
    _add_training(p)
    p.add_argument("--losses", dest="seg_losses", type=_name_list(("dice", "boundary"), required=("dice",)))
    p.add_argument("--base-width", type=int)

    p = command("train-reg", "train the angle regression network")
    _add_training(p)
    p.add_argument("--seg-ckpt")
    p.add_argument("--maps", choices=tuple(MAP_MODES))
    p.add_argument("--inputs", type=_name_list(INPUT_CHANNELS, required=("image",)))
    p.add_argument("--losses", type=_name_list(REG_TERMS))
    p.add_argument("--width-mult", type=float)
    p.add_argument("--depth-mult", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--init-weights", help="backbone state_dict to start from")

    p = command("evaluate", "write a metric report")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--seg-ckpt")
    p.add_argument("--reg-ckpt")
    p.add_argument("--maps", choices=tuple(MAP_MODES))
    p.add_argument("--threshold", type=float)
    p.add_argument("--dump", help="directory for ground-truth and predicted map arrays")

    p = command("visualize", "render an overlay or Grad-CAM heatmap for one sample")
    p.add_argument("--sample")
    p.add_argument("--mode", choices=("overlay", "gradcam"))
    p.add_argument("--target", choices=ANGLE_NAMES)
    p.add_argument("--channel", choices=MAP_NAMES)
    p.add_argument("--seg-ckpt")
    p.add_argument("--reg-ckpt")
    p.add_argument("--maps", choices=tuple(MAP_MODES))
    p.add_argument("--threshold", type=float)
    return parser


def resolve_options(command: str, flags: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    flags = dict(flags)
    opts = dict(DEFAULTS[command])
    config_path = flags.pop("config", None)
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        if isinstance(data, dict) and "options" in data:
            if data.get("command", command) != command:
                raise UsageError(f"config file is for {data['command']!r}, not {command!r}")
            data = data["options"]
        known = set(opts) | set(REQUIRED[command])
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key in ("inputs", "losses", "seg_losses"):
            if key in data and isinstance(data[key], str):
                data[key] = data[key].split(",")
        opts.update(data)
    opts.update(flags)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    for key in ("inputs", "losses", "seg_losses"):
        if key in opts:
            opts[key] = list(opts[key])
    return opts


def write_snapshot(directory, command: str, opts: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT
    path.write_text(json.dumps({"command": command, "version": __version__, "options": opts},
                               indent=2, sort_keys=True) + "\n")
    return path


def _checked(cls, *args, **kwargs):
    """Build a config object, reporting invalid values as usage errors."""
    try:
        return cls(*args, **kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid {getattr(cls, '__qualname__', cls)}: {exc}") from exc


def _preprocess_cfg(o) -> PreprocessConfig:
    return _checked(PreprocessConfig, o["height"], o["width"], o["margin"], not o["no_equalize"])


def _train_cfg(stage, o) -> TrainConfig:
    aug = _checked(AugmentationConfig, flip_prob=o["flip_prob"], seed=o["seed"])
    kw = dict(stage=stage, epochs=o["epochs"], base_lr=o["lr"], batch_size=o["batch"], seed=o["seed"],
              deterministic=o["deterministic"], augment=not o["no_augment"], augmentation=aug,
              val_fraction=o["val_fraction"], dilation_kernel=o["dilation"])
    if stage == "seg":
        kw["seg_losses"] = tuple(o["seg_losses"])
    else:
        kw.update(reg_input_maps=MAP_MODES[o["maps"]], inputs=tuple(o["inputs"]), losses=tuple(o["losses"]))
    return _checked(TrainConfig, **kw)


def _records(o, split):
    diagnostics = []
    records = load_records(o["manifest"], _preprocess_cfg(o), split=split, diagnostics=diagnostics)
    for d in diagnostics:
        log.warning("rejected entry: %s", d)
    if not records:
        raise DataError(f"no usable {split or ''} records in {o['manifest']}".replace("  ", " "))
    return records


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(o) -> dict:
    diagnostics = []
    path = prepare_dataset(o["manifest"], o["out"], _preprocess_cfg(o), o["dilation"], diagnostics)
    return {"manifest": str(path), "rejected": len(diagnostics)}


def cmd_train_seg(o) -> dict:
    cfg = _train_cfg("seg", o)
    model_cfg = _checked(SegNetConfig, base_width=o["base_width"], input_size=(o["height"], o["width"]))
    result = train_segmentation(_records(o, "train"), cfg, model_cfg, out_dir=o["out"])
    return {k: str(v) for k, v in result.checkpoints.items()}


def cmd_train_reg(o) -> dict:
    cfg = _train_cfg("reg", o)
    model_cfg = _checked(RegNetConfig.for_inputs, cfg.inputs, width_mult=o["width_mult"],
                         depth_mult=o["depth_mult"], dropout=o["dropout"], input_size=(o["height"], o["width"]))
    result = train_regression(_records(o, "train"), cfg, seg_model=o["seg_ckpt"], model_cfg=model_cfg,
                              out_dir=o["out"], init_weights=o["init_weights"])
    return {k: str(v) for k, v in result.checkpoints.items()}


def cmd_evaluate(o) -> dict:
    records = _records(o, None if o["split"] == "all" else o["split"])
    if o["reg_ckpt"] is not None:
        report = evaluate_regression(o["reg_ckpt"], o["seg_ckpt"], records, maps=MAP_MODES[o["maps"]],
                                     dilation_kernel=o["dilation"])
    elif o["seg_ckpt"] is not None:
        report = evaluate_segmentation(o["seg_ckpt"], records, threshold=o["threshold"],
                                       dilation_kernel=o["dilation"], dump_dir=o["dump"])
    else:
        raise UsageError("evaluate needs --seg-ckpt and/or --reg-ckpt")
    path = report.save(o["out"])
    return {"report": str(path), "stage": report.stage, "config_digest": report.config_digest}


@torch.no_grad()
def _predict_one(ckpt, image):
    model = model_from_checkpoint(ckpt, kind="seg")
    return model(torch.from_numpy(normalize_image(image))[None, None])[0]


def cmd_visualize(o) -> dict:
    matches = [r for r in _records(o, None) if r.source_id == o["sample"]]
    if not matches:
        raise DataError(f"sample {o['sample']!r} not in {o['manifest']}", o["sample"])
    rec = matches[0]
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if o["mode"] == "overlay":
        if o["seg_ckpt"] is None or rec.landmarks is None:
            raise UsageError("overlay needs --seg-ckpt and a labelled sample")
        k = MAP_NAMES.index(o["channel"])
        gt = synthesize_maps(rec.landmarks, rec.image.shape, o["dilation"]).stack()[k]
        pred = (_predict_one(o["seg_ckpt"], rec.image)[k] >= o["threshold"]).numpy()
        rgb = render_overlay(gt, pred, rec.image)
    else:
        if o["reg_ckpt"] is None:
            raise UsageError("gradcam needs --reg-ckpt")
        reg = model_from_checkpoint(o["reg_ckpt"], kind="reg")
        image = torch.from_numpy(normalize_image(rec.image))[None, None]
        maps = None
        if len(reg.cfg.inputs) > 1:
            if o["maps"] == "gt":
                maps = torch.from_numpy(synthesize_maps(rec.landmarks, rec.image.shape, o["dilation"]).stack())[None]
            elif o["seg_ckpt"] is None:
                raise UsageError("gradcam with predicted maps needs --seg-ckpt")
            else:
                maps = _predict_one(o["seg_ckpt"], rec.image)[None]
        heat = gradcam_heatmap(reg, assemble_inputs(image, maps, reg.cfg.inputs)[0], o["target"])
        np.save(out.with_suffix(".npy"), heat)
        colored = cv2.applyColorMap(np.round(255 * heat).astype(np.uint8), cv2.COLORMAP_JET)
        gray = cv2.cvtColor(rec.image, cv2.COLOR_GRAY2BGR)
        rgb = cv2.cvtColor(cv2.addWeighted(gray, 0.5, colored, 0.5, 0), cv2.COLOR_BGR2RGB)
    if not cv2.imwrite(str(out), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {out}")
    return {"image": str(out)}


COMMANDS = {
    "prepare": cmd_prepare,
    "train-seg": cmd_train_seg,
    "train-reg": cmd_train_reg,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
}


def _output_dir(command, out):
    out = Path(out)
    return out.parent if command in ("evaluate", "visualize") else out


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": str(message)}) + "\n")
    return code


def run(argv=None) -> int:
    """Parse ``argv``, dispatch one subcommand and return the exit status."""
    try:
        ns = build_parser().parse_args(argv)
        if ns.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        flags = {k: v for k, v in vars(ns).items() if k != "command"}
        opts = resolve_options(ns.command, flags)
        write_snapshot(_output_dir(ns.command, opts["out"]), ns.command, opts)
        result = COMMANDS[ns.command](opts)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DataError, LandmarkError, EvaluationError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (TrainingError, ConfigError, RuntimeError, OSError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)
    sys.stdout.write(json.dumps({"status": "ok", "command": ns.command, **result}) + "\n")
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


__all__ = ["DEFAULTS", "EXIT_DATA", "EXIT_OK", "EXIT_RUNTIME", "EXIT_USAGE", "build_parser", "main",
           "resolve_options", "run"]
