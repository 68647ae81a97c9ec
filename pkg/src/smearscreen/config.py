"""Pipeline configuration: defaults, config-file parsing, and manifests.

Every CLI flag has a config-file equivalent (`key = value` under a
`[section]` header). A flag overrides the file, which overrides the
default, and the manifest written next to each run's outputs records the
winning value and where it came from. Unknown file keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ValidationError


def _parse_archs(raw: str) -> list[str]:
    return [a.strip() for a in raw.split(",") if a.strip()]


def _parse_patience(raw: str) -> Optional[int]:
    if raw.strip().lower() in ("none", "off", ""):
        return None
    return int(raw)


@dataclass(frozen=True)
class Option:
    name: str  # underscore form; the CLI flag is the dashed form
    section: str
    parse: Callable[[str], Any]
    default: Any
    help: str


OPTIONS: tuple[Option, ...] = (
    # detection
    Option("sigma", "detect", float, 2.0, "Gaussian blur sigma before gradients"),
    Option("rmin", "detect", int, 12, "minimum circle radius in pixels"),
    Option("rmax", "detect", int, 30, "maximum circle radius in pixels"),
    Option("vote_threshold", "detect", float, 0.45, "accumulator fraction of a full ring"),
    Option("nms", "detect", int, 20, "non-max suppression radius in pixels"),
    Option("margin", "detect", int, 3, "extra clearance a complete cell needs inside its tile"),
    Option("match_tol", "detect", float, 5.0, "center/radius tolerance when matching circles"),
    # data
    Option("tile_size", "data", int, 71, "square tile side length"),
    Option("stride", "data", int, 71, "grid tiling stride"),
    Option("count", "data", int, 4, "number of synthetic images"),
    Option("cells", "data", int, 40, "cells per synthetic image"),
    Option("infected_fraction", "data", float, 0.45, "fraction of infected cells"),
    Option("width", "data", int, 640, "synthetic image width"),
    Option("height", "data", int, 560, "synthetic image height"),
    Option("noise", "data", float, 0.01, "additive Gaussian noise sigma"),
    Option("val_fraction", "data", float, 104 / 1056, "holdout validation fraction"),
    Option("test_fraction", "data", float, 320 / 1056, "holdout test fraction"),
    # training
    Option("arch", "train", _parse_archs, ["vgg-s"], "architecture preset(s)"),
    Option("epochs", "train", int, 100, "training epochs"),
    Option("learning_rate", "train", float, 0.0001, "SGD learning rate"),
    Option("dropout", "train", float, 0.5, "dropout rate"),
    Option("batch_size", "train", int, 128, "minibatch size"),
    Option("momentum", "train", float, 0.9, "SGD momentum"),
    Option("patience", "train", _parse_patience, 10, "early-stop patience (or 'none')"),
    Option("dtype", "train", str, "float64", "engine precision: float64 or float32"),
    # gradient checking
    Option("samples", "gradcheck", _parse_patience, 25, "params checked per tensor ('none' = all)"),
    Option("epsilon", "gradcheck", float, 1e-5, "finite-difference step"),
    Option("seeds", "gradcheck", int, 1, "number of seeds to check"),
    # cross-validation
    Option("k", "cv", int, 5, "number of folds"),
    Option("protocol", "cv", str, "holdout", "pipeline protocol: holdout or cv"),
    # run
    Option("seed", "run", int, 0, "global random seed"),
)

_BY_NAME = {opt.name: opt for opt in OPTIONS}


class PipelineConfig:
    """Resolved option values plus the source of each (default/config/flag)."""

    def __init__(self, values: dict[str, Any], sources: dict[str, str]):
        self._values = values
        self.sources = sources

    def __getattr__(self, name: str) -> Any:
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def items(self):
        return self._values.items()


def load_config_file(path) -> dict[str, Any]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValidationError(f"cannot read config file {path}")
    values: dict[str, Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            opt = _BY_NAME.get(key)
            if opt is None or opt.section != section:
                raise ValidationError(f"{path}: unknown config key [{section}] {key}")
            try:
                values[key] = opt.parse(raw)
            except ValueError as exc:
                raise ValidationError(f"{path}: bad value for {key}: {raw!r}") from exc
    return values


def resolve(flag_values: dict[str, Any], config_path: Optional[str] = None) -> PipelineConfig:
    """Merge defaults, config file, and explicit flags (in rising priority)."""
    values = {opt.name: opt.default for opt in OPTIONS}
    sources = {opt.name: "default" for opt in OPTIONS}
    if config_path:
        for key, val in load_config_file(config_path).items():
            values[key] = val
            sources[key] = "config"
    for key, val in flag_values.items():
        if key in _BY_NAME and val is not None:
            values[key] = val
            sources[key] = "flag"
    cfg = PipelineConfig(values, sources)
    _validate(cfg)
    return cfg


def _validate(cfg: PipelineConfig) -> None:
    if cfg.sigma <= 0:
        raise ValidationError("sigma must be positive")
    if not 0 < cfg.rmin <= cfg.rmax:
        raise ValidationError(f"need 0 < rmin <= rmax, got [{cfg.rmin}, {cfg.rmax}]")
    if not 0.0 < cfg.vote_threshold <= 1.0:
        raise ValidationError("vote_threshold must be in (0, 1]")
    if cfg.nms < 1 or cfg.margin < 0 or cfg.match_tol <= 0:
        raise ValidationError("nms must be >= 1, margin >= 0, match_tol > 0")
    if cfg.tile_size < 2 * (cfg.rmax + cfg.margin):
        raise ValidationError(
            f"tile_size {cfg.tile_size} cannot hold a complete cell of radius "
            f"{cfg.rmax} with margin {cfg.margin}"
        )
    if cfg.stride < 1 or cfg.count < 0 or cfg.cells < 0:
        raise ValidationError("stride must be >= 1; count and cells nonnegative")
    if not 0.0 <= cfg.infected_fraction <= 1.0:
        raise ValidationError("infected_fraction must be in [0, 1]")
    if cfg.width < 1 or cfg.height < 1 or cfg.noise < 0:
        raise ValidationError("width/height must be positive, noise nonnegative")
    if cfg.val_fraction < 0 or cfg.test_fraction < 0 or cfg.val_fraction + cfg.test_fraction >= 1:
        raise ValidationError("holdout fractions must be nonnegative and sum below 1")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ValidationError("epochs and batch_size must be positive")
    if cfg.learning_rate < 0 or cfg.momentum < 0:
        raise ValidationError("learning_rate and momentum must be nonnegative")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ValidationError("dropout must be in [0, 1)")
    if cfg.patience is not None and cfg.patience < 1:
        raise ValidationError("patience must be positive or 'none'")
    if cfg.dtype not in ("float64", "float32"):
        raise ValidationError("dtype must be float64 or float32")
    if cfg.samples is not None and cfg.samples < 1:
        raise ValidationError("samples must be positive or 'none'")
    if cfg.epsilon <= 0 or cfg.seeds < 1:
        raise ValidationError("epsilon must be positive and seeds >= 1")
    if cfg.k < 2:
        raise ValidationError("k must be >= 2")
    if cfg.protocol not in ("holdout", "cv"):
        raise ValidationError("protocol must be holdout or cv")
    if not cfg.arch:
        raise ValidationError("at least one architecture is required")


def write_manifest(cfg: PipelineConfig, command: str, out_dir) -> Path:
    """Record the resolved configuration and each value's source."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "[manifest]",
        f"created = {datetime.now(timezone.utc).isoformat()}",
        f"command = {command}",
        "",
        "[config]",
    ]
    for key, value in sorted(cfg.items()):
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("[sources]")
    for key in sorted(cfg.sources):
        lines.append(f"{key} = {cfg.sources[key]}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path
