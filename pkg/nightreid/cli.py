"""Command line entry point: ``nightreid <command> [flags]``."""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from functools import lru_cache
import json
import logging
import os
from pathlib import Path
import sys
from typing import Any, Callable, Sequence

import torch
import torchvision.transforms.functional as TF

from .config import Config, config_defaults, load_config
from .const import ENV_WORK_DIR, PRESETS, SUBNET_RELIGHT, SUBNET_REID, SUBNET_SHARED
from .datasets import check_disjoint, load_manifest, synthesize_dark, write_degradation_report, write_manifest
from .errors import ConfigError, NightReIDError
from .evaluation import emit_report, evaluate_model
from .imageops import load_image, save_image
from .metrics import MetricsLogger, export_metrics
from .training import alternating_loop, load_checkpoint

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@lru_cache(maxsize=1)
def strings() -> dict[str, Any]:
    """Return the user-facing strings."""
    path = Path(__file__).parent / "translations" / "en.json"
    return json.loads(path.read_text(encoding="utf-8"))


def _domains(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


@dataclass(frozen=True)
class Flag:
    """A command-line flag bound to one config key."""

    name: str
    key: str
    type: Callable[[str], Any] = str
    required: bool = False
    nargs: str | None = None
    choices: tuple[str, ...] | None = None


COMMAND_FLAGS: dict[str, tuple[Flag, ...]] = {
    "synth": (
        Flag("src", "data.source_manifest"),
        Flag("out", "data.out_dir"),
        Flag("seed", "degradation.seed", int, required=True),
    ),
    "train": (
        Flag("real", "data.real_manifest"),
        Flag("synthetic", "data.synthetic_manifest"),
        Flag("query", "data.query_manifest"),
        Flag("gallery", "data.gallery_manifest"),
        Flag("out", "data.out_dir"),
        Flag("seed", "train.seed", int, required=True),
        Flag("ckpt", "data.checkpoint"),
        Flag("pretrained", "data.pretrained"),
        Flag("preset", "model.preset", choices=tuple(PRESETS)),
        Flag("epochs", "train.epochs", int),
        Flag("steps_per_epoch", "train.steps_per_epoch", int),
        Flag("lr", "train.base_lr", float),
        Flag("pattern", "train.pattern", _domains),
        Flag("alternation", "train.alternation", choices=("iteration", "epoch")),
        Flag("ablation", "train.ablation"),
        Flag("eval_every", "train.eval_every", int),
        Flag("metrics_log", "data.metrics_log"),
    ),
    "eval": (
        Flag("ckpt", "data.checkpoint"),
        Flag("query", "data.query_manifest"),
        Flag("gallery", "data.gallery_manifest"),
        Flag("out", "data.out_dir"),
        Flag("batch_size", "eval.batch_size", int),
        Flag("exclude_same_camera", "eval.exclude_same_camera"),
        Flag("features", "data.features_dir"),
    ),
    "enhance": (
        Flag("ckpt", "data.checkpoint"),
        Flag("in", "data.inputs", nargs="+"),
        Flag("out", "data.out_dir"),
    ),
    "report": (
        Flag("metrics_log", "data.metrics_log"),
        Flag("out", "data.out_dir"),
    ),
}


def _default_of(defaults: dict[str, Any], key: str) -> Any:
    section, name = key.split(".", 1)
    return defaults[section].get(name)


def build_parser() -> argparse.ArgumentParser:
    """Build the parser; flag defaults shown in help come from the config schema."""
    text = strings()
    defaults = config_defaults()
    parser = argparse.ArgumentParser(prog="nightreid")
    parser.add_argument("--config", help=text["options"]["config"])
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help=text["options"]["log_level"],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in COMMAND_FLAGS.items():
        info = text["commands"][command]
        cmd = sub.add_parser(command, help=info["description"], description=info["description"])
        cmd.add_argument("--config", dest="sub_config", help=text["options"]["config"])
        for flag in flags:
            option = "--" + flag.name.replace("_", "-")
            cmd.add_argument(
                option,
                dest=flag.name,
                type=flag.type,
                nargs=flag.nargs,
                choices=flag.choices,
                required=flag.required,
                default=None,
                help=f"{info['flags'][flag.name]} [{flag.key}, default: {_default_of(defaults, flag.key)}]",
            )
    return parser


@dataclass
class CommandSpec:
    """A parsed command: the resolved configuration and the command to run."""

    command: str
    config: Config
    overrides: dict[str, Any] = field(default_factory=dict)


def parse_command(argv: Sequence[str] | None = None) -> tuple[CommandSpec, argparse.Namespace]:
    """Parse ``argv`` into a :class:`CommandSpec`."""
    args = build_parser().parse_args(argv)
    overrides: dict[str, Any] = {}
    for flag in COMMAND_FLAGS[args.command]:
        value = getattr(args, flag.name)
        if value is not None:
            overrides[flag.key] = value
    work_dir = os.environ.get(ENV_WORK_DIR)
    if work_dir and "data.out_dir" not in overrides:
        overrides["data.out_dir"] = work_dir
    config = load_config(args.sub_config or args.config, overrides)
    return CommandSpec(command=args.command, config=config, overrides=overrides), args


def _require(value: Any, flag: str, command: str) -> Any:
    if not value:
        raise ConfigError(strings()["errors"]["missing_path"].format(flag=flag, command=command))
    return value


def _synth(spec: CommandSpec) -> None:
    cfg = spec.config
    source = load_manifest(_require(cfg.data.source_manifest, "src", "synth"))
    out = Path(cfg.data.out_dir)
    split, report = synthesize_dark(source, cfg.degradation, out)
    write_manifest(split, out / "manifest.txt")
    write_degradation_report(report, out / "degradation.jsonl")
    failed = sum(1 for r in report if r.error)
    print(strings()["messages"]["synth_done"].format(count=len(split), out=out, failed=failed))


def _train(spec: CommandSpec) -> None:
    cfg = spec.config
    data = cfg.data
    out = Path(data.out_dir)
    real = load_manifest(data.real_manifest) if data.real_manifest else None
    synthetic = load_manifest(data.synthetic_manifest) if data.synthetic_manifest else None
    evaluate_fn = None
    if data.query_manifest and data.gallery_manifest:
        query = load_manifest(data.query_manifest)
        gallery = load_manifest(data.gallery_manifest)
        check_disjoint(query, gallery)

        def evaluate_fn(model) -> float:
            return evaluate_model(
                model, query, gallery, cfg.eval.ranks, cfg.eval.exclude_same_camera, cfg.eval.batch_size
            ).mAP

    state = load_checkpoint(data.checkpoint) if data.checkpoint else None
    checkpoint = out / "checkpoint.bin"
    resume_step = state.step if state is not None else None
    with MetricsLogger(data.metrics_log or out / "metrics.jsonl", resume_step) as metrics:
        state = alternating_loop(
            real,
            synthetic,
            cfg,
            state=state,
            metrics=metrics,
            checkpoint_path=checkpoint,
            evaluate_fn=evaluate_fn,
        )
    print(strings()["messages"]["train_done"].format(step=state.step, path=checkpoint))


def _eval(spec: CommandSpec) -> None:
    cfg = spec.config
    data = cfg.data
    state = load_checkpoint(
        _require(data.checkpoint, "ckpt", "eval"), subnets=(SUBNET_SHARED, SUBNET_REID), restore_rng=False
    )
    query = load_manifest(_require(data.query_manifest, "query", "eval"))
    gallery = load_manifest(_require(data.gallery_manifest, "gallery", "eval"))
    check_disjoint(query, gallery)
    report = evaluate_model(
        state.model,
        query,
        gallery,
        cfg.eval.ranks,
        cfg.eval.exclude_same_camera,
        cfg.eval.batch_size,
        features_dir=data.features_dir,
    )
    emit_report(report, Path(data.out_dir) / "eval_report")
    print(report.summary())


def _enhance(spec: CommandSpec) -> None:
    data = spec.config.data
    inputs = [Path(p) for p in _require(data.inputs, "in", "enhance")]
    state = load_checkpoint(
        _require(data.checkpoint, "ckpt", "enhance"), subnets=(SUBNET_SHARED, SUBNET_RELIGHT), restore_rng=False
    )
    model = state.model.eval()
    out = Path(data.out_dir)
    single_file = len(inputs) == 1 and out.suffix.lower() in _IMAGE_SUFFIXES
    if not single_file:
        out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        image = load_image(path)
        x = TF.resize(image, list(model.config.img_size), antialias=True).clamp(0.0, 1.0)
        with torch.no_grad():
            reflectance = model.enhance(x.unsqueeze(0)).reflectance[0]
        reflectance = TF.resize(reflectance, list(image.shape[-2:]), antialias=True).clamp(0.0, 1.0)
        target = out if single_file else out / f"{path.stem}.png"
        save_image(reflectance, target)
        _LOGGER.debug("Enhanced %s -> %s", path, target)
    print(strings()["messages"]["enhance_done"].format(count=len(inputs)))


def _report(spec: CommandSpec) -> None:
    data = spec.config.data
    out = Path(data.out_dir)
    written = export_metrics(_require(data.metrics_log, "metrics-log", "report"), out)
    print(strings()["messages"]["report_done"].format(count=len(written), out=out))


COMMANDS: dict[str, Callable[[CommandSpec], None]] = {
    "synth": _synth,
    "train": _train,
    "eval": _eval,
    "enhance": _enhance,
    "report": _report,
}


def dispatch(spec: CommandSpec) -> int:
    """Run a command and map failures to exit statuses with one diagnostic line."""
    errors = strings()["errors"]
    try:
        COMMANDS[spec.command](spec)
    except ConfigError as err:
        return _fail(errors["config"], err, EXIT_CONFIG)
    except OSError as err:
        return _fail(errors["io"], err, EXIT_IO)
    except NightReIDError as err:
        return _fail(errors["validation"], err, EXIT_VALIDATION)
    except Exception as err:  # pylint: disable=broad-except
        _LOGGER.exception("Unexpected error in %s", spec.command)
        return _fail(errors["unexpected"], err, EXIT_UNEXPECTED)
    return EXIT_OK


def _fail(template: str, err: BaseException, status: int) -> int:
    print(template.format(error=err), file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, configure logging and dispatch."""
    parser_args = argv if argv is not None else sys.argv[1:]
    errors = strings()["errors"]
    try:
        spec, args = parse_command(parser_args)
    except ConfigError as err:
        return _fail(errors["config"], err, EXIT_CONFIG)
    except OSError as err:
        return _fail(errors["io"], err, EXIT_IO)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    return dispatch(spec)
