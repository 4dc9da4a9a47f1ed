"""INI run configuration with typed sections and command-line overrides.

Sections and keys::

    [arch]      preset + every ArchConfig field (defaults come from the preset)
    [optim]     OptimConfig fields + seed
    [data]      SynthSpec fields + dataset, clip_len, stride, allow_free_stride,
                crop, five_crop, flip_p, mean_subtract
    [transfer]  TransferConfig fields
    [ablation]  axis

Values use ``key = value`` with ``#`` comments. Tuples are comma separated
(``blocks = 1,1,1,1``); triples also accept ``3x3x3``; ``none`` clears an
optional value.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .arch import ArchConfig, preset
from .data import SynthSpec
from .errors import ConfigError
from .train import ABLATION_AXES, OptimConfig
from .transfer import TransferConfig

# --------------------------------------------------------------------------
# value codecs
# --------------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(s: str):
        return None if s.strip().lower() in ("none", "") else parse(s)

    return inner


def _tuple_of(parse: Callable[[str], Any], sep_x: bool = False) -> Callable[[str], tuple]:
    def inner(s: str):
        parts = s.split("x") if sep_x and "x" in s and "," not in s else s.split(",")
        return tuple(parse(p.strip()) for p in parts if p.strip())

    return inner


def _pairs(s: str) -> tuple:
    return tuple(tuple(int(v) for v in item.strip().split("x")) for item in s.split(","))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in item) for item in value)
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _codec_for(default, key: str) -> Callable[[str], Any]:
    if key == "stage_strides":
        return _pairs
    if key in ("inner_widths",):
        return _optional(_tuple_of(int, sep_x=True))
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        if default and isinstance(default[0], str):
            return _tuple_of(str)
        if default and isinstance(default[0], float):
            return _tuple_of(float)
        return _tuple_of(int, sep_x=True)
    return str


OPTIONAL_FLOATS = {"target_train_acc", "target_val_acc"}

DATA_EXTRAS = {
    "dataset": (_optional(str), None),
    "clip_len": (_optional(int), None),
    "stride": (int, 1),
    "allow_free_stride": (_bool, False),
    "crop": (_optional(int), None),
    "five_crop": (_bool, False),
    "flip_p": (float, 0.0),
    "mean_subtract": (_bool, False),
}


def _schema(instance, extras: Optional[dict] = None) -> dict[str, tuple[Callable, Any]]:
    out = {}
    for f in dataclasses.fields(instance):
        default = getattr(instance, f.name)
        codec = _optional(float) if f.name in OPTIONAL_FLOATS else _codec_for(default, f.name)
        out[f.name] = (codec, default)
    out.update(extras or {})
    return out


def section_schemas(arch_preset: str = "toy-stc-resnet") -> dict[str, dict]:
    arch = _schema(preset(arch_preset))
    arch.pop("name")
    arch = {"preset": (str, arch_preset), **arch}
    return {
        "arch": arch,
        "optim": {**_schema(OptimConfig()), "seed": (int, 42)},
        "data": _schema(SynthSpec(), DATA_EXTRAS),
        "transfer": _schema(TransferConfig()),
        "ablation": {"axis": (_optional(str), None)},
    }


# --------------------------------------------------------------------------
# resolved configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def arch(self) -> ArchConfig:
        values = dict(self.sections["arch"])
        name = values.pop("preset")
        return ArchConfig(**values, name=name)

    def optim(self) -> OptimConfig:
        values = dict(self.sections["optim"])
        values.pop("seed")
        return OptimConfig(**values)

    @property
    def seed(self) -> int:
        return self.sections["optim"]["seed"]

    def synth(self) -> SynthSpec:
        values = {k: v for k, v in self.sections["data"].items() if k not in DATA_EXTRAS}
        return SynthSpec(**values)

    def transfer(self) -> TransferConfig:
        return TransferConfig(**self.sections["transfer"])

    @property
    def ablation_axis(self) -> Optional[str]:
        return self.sections["ablation"]["axis"]

    def to_ini(self) -> str:
        lines = ["# resolved run configuration"]
        for section, values in self.sections.items():
            lines.append(f"\n[{section}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
        return "\n".join(lines) + "\n"

    def echo(self, directory) -> Path:
        path = Path(directory) / "config.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _read_ini(text: str, source: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_overrides(args: Sequence[str]) -> dict[str, dict[str, str]]:
    """``["--optim.lr", "0.01", "--data.seed=3"]`` -> {"optim": {"lr": "0.01"}, ...}."""
    out: dict[str, dict[str, str]] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"flag {tok} needs a value")
            key, value = body, args[i + 1]
            i += 2
        section, _, name = key.partition(".")
        out.setdefault(section, {})[name.replace("-", "_")] = value
    return out


def parse_config(path=None, overrides: Optional[dict] = None, text: Optional[str] = None) -> RunConfig:
    """Resolve a RunConfig from an INI file (or ``text``) plus overrides.

    Overrides win over file values; absent keys take defaults. Arch
    defaults come from the selected preset.
    """
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw = _read_ini(p.read_text(), str(p))
    elif text is not None:
        raw = _read_ini(text, "<text>")
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)

    arch_preset = raw.get("arch", {}).get("preset", "toy-stc-resnet").strip()
    preset(arch_preset)  # rejects unknown presets
    schemas = section_schemas(arch_preset)
    sections = {}
    for section, values in raw.items():
        if section not in schemas:
            raise ConfigError(f"unknown section [{section}]; known: {', '.join(schemas)}")
        for key in values:
            if key not in schemas[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, schema in schemas.items():
        resolved = {}
        for key, (codec, default) in schema.items():
            if key in raw.get(section, {}):
                try:
                    resolved[key] = codec(raw[section][key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{section}] {key}: cannot parse {raw[section][key]!r} ({exc})") from None
            else:
                resolved[key] = default
        sections[section] = resolved
    axis = sections["ablation"]["axis"]
    if axis is not None and axis not in ABLATION_AXES:
        raise ConfigError(f"[ablation] axis: must be one of {', '.join(ABLATION_AXES)}, got {axis!r}")
    cfg = RunConfig(sections)
    # surface range errors now, naming the section
    cfg.arch().validate()
    cfg.optim().validate()
    cfg.synth().validate()
    cfg.transfer().validate()
    return cfg
