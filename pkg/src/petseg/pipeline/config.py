"""Run configuration: one section per module, stored as INI-style key = value text.

Tuples are written comma-separated, the sampler schedule as
``epoch:probability`` items, and ``none`` stands for an unset optional.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from petseg.errors import BadConfig
from petseg.geometry import AugmentConfig
from petseg.numerics import LossConfig, ScheduleConfig
from petseg.sampler import SamplerConfig
from petseg.stats import StatConfig


@dataclass(frozen=True)
class CropConfig:
    hecktor_shape: tuple[int, int, int] = (192, 192, 192)
    autopet_shape: tuple[int, int, int] | None = None
    policy_z: str = "top"
    z_anchor: str = "high"


@dataclass(frozen=True)
class PrepConfig:
    hecktor_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_gtvp: int = 1
    label_gtvn: int = 2
    pet_window: tuple[float, float] | None = None
    image_dtype: str = "float32"
    suffix: str = ".nii.gz"


@dataclass(frozen=True)
class MetricConfig:
    empty_empty: str = "one"
    threshold: float = 0.5


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    jobs: int = 1
    output_dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    crop: CropConfig = field(default_factory=CropConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # no default cycle length; the section is absent unless configured
    schedule: ScheduleConfig | None = None
    stats: StatConfig = field(default_factory=StatConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def with_overrides(self, **sections) -> "RunConfig":
        """Replace fields inside sections: ``with_overrides(run={"seed": 3})``."""
        updates = {}
        for name, values in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **values)
        return dataclasses.replace(self, **updates)


SECTION_TYPES = {
    f.name: typing.get_type_hints(RunConfig)[f.name] for f in dataclasses.fields(RunConfig)
}


def _section_class(name: str):
    tp = SECTION_TYPES[name]
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    return args[0] if args else tp


def _unwrap_optional(tp):
    args = typing.get_args(tp)
    if type(None) in args:
        return next(a for a in args if a is not type(None)), True
    return tp, False


def _format(value, tp) -> str:
    inner, optional = _unwrap_optional(tp)
    if value is None:
        return "none"
    origin = typing.get_origin(inner)
    if origin is tuple:
        elem = typing.get_args(inner)[0]
        if typing.get_origin(elem) is tuple:
            return ", ".join(f"{a}:{_format(b, float)}" for a, b in value)
        return ", ".join(_format(v, elem) for v in value)
    if inner is bool:
        return "true" if value else "false"
    if inner is float:
        return repr(float(value))
    return str(value)


def _parse_scalar(text: str, tp):
    text = text.strip()
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise BadConfig(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _parse(text: str, tp):
    inner, optional = _unwrap_optional(tp)
    if text.strip().lower() == "none":
        if not optional:
            raise BadConfig("'none' given for a required value")
        return None
    if typing.get_origin(inner) is tuple:
        elem = typing.get_args(inner)[0]
        items = [t for t in text.split(",") if t.strip()]
        if typing.get_origin(elem) is tuple:
            out = []
            for item in items:
                epoch, _, prob = item.partition(":")
                out.append((int(epoch), float(prob)))
            return tuple(out)
        return tuple(_parse_scalar(t, elem) for t in items)
    return _parse_scalar(text, inner)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in SECTION_TYPES:
        section = getattr(cfg, name)
        if section is None:
            continue
        cls = type(section)
        hints = typing.get_type_hints(cls)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_format(getattr(section, f.name), hints[f.name])}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise BadConfig(str(exc)) from exc
    sections = {}
    for name in parser.sections():
        if name not in SECTION_TYPES:
            raise BadConfig(f"unknown config section [{name}]")
        cls = _section_class(name)
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in parser.items(name):
            if key not in hints:
                raise BadConfig(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = _parse(raw, hints[key])
            except (ValueError, TypeError) as exc:
                raise BadConfig(f"[{name}] {key}: {exc}") from exc
        try:
            sections[name] = cls(**values)
        except TypeError as exc:
            raise BadConfig(f"[{name}]: {exc}") from exc
    cfg = RunConfig(**sections)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    cfg.sampler.validate()
    cfg.augment.validate()
    cfg.loss.validate()
    cfg.stats.validate()
    if cfg.schedule is not None:
        cfg.schedule.validate()
    if cfg.metrics.empty_empty not in ("one", "zero", "exclude"):
        raise BadConfig(f"unknown empty_empty policy {cfg.metrics.empty_empty!r}")
    if cfg.crop.z_anchor not in ("high", "low"):
        raise BadConfig("z_anchor must be 'high' or 'low'")


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
