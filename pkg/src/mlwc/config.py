"""Run configuration: ``section.key = value`` text with a typed key registry."""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .data import SynthSpec
from .evaluation import EvalConfig
from .heads import HeadConfig
from .losses import LossConfig
from .trainer import TrainConfig
from .weightgen import AttGenConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "data": SynthSpec,
    "backbone": BackboneConfig,
    "heads": HeadConfig,
    "losses": LossConfig,
    "trainer": TrainConfig,
    "weightgen": AttGenConfig,
    "eval": EvalConfig,
}

# public key -> dataclass field, where the two differ
ALIASES = {"losses.lambda": "weight_decay"}

ENUMS = {
    "data.base_family": ("A", "B"),
    "data.novel_family": ("A", "B"),
    "data.channels": (1, 3),
    "heads.relation_input": ("scaled", "unscaled"),
    "weightgen.scope": ("per-branch", "combined"),
    "eval.generator": ("avg", "att"),
    "eval.crops": (1, 5),
    "eval.novel_norm": ("per-branch", "whole"),
}


@dataclass(frozen=True)
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    weightgen: AttGenConfig = field(default_factory=AttGenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_text(self) -> str:
        """Every key with its resolved value, one per line, in registry order."""
        lines = []
        for key, (section, fname, _) in registry().items():
            lines.append(f"{key} = {_format(getattr(getattr(self, section), fname))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _public_name(section: str, fname: str) -> str:
    for key, target in ALIASES.items():
        if key.startswith(section + ".") and target == fname:
            return key
    return f"{section}.{fname}"


def registry() -> dict[str, tuple[str, str, object]]:
    """Public dotted key -> (section, field name, type)."""
    reg = {}
    for section, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            reg[_public_name(section, f.name)] = (section, f.name, hints[f.name])
    return reg


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_scalar(text: str, typ):
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is str:
        return text
    raise ValueError(f"unsupported type {typ}")


def _parse_value(text: str, typ):
    args = typing.get_args(typ)
    origin = typing.get_origin(typ)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if text.lower() == "none":
            return None
        (typ,) = [a for a in args if a is not type(None)]
        args, origin = typing.get_args(typ), typing.get_origin(typ)
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("expected a comma-separated list")
        return tuple(_parse_scalar(p, args[0]) for p in parts)
    return _parse_scalar(text, typ)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unset keys keep their defaults."""
    reg = registry()
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in reg:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        section, fname, typ = reg[key]
        try:
            parsed = _parse_value(value, typ)
        except ValueError:
            raise ConfigError(f"line {lineno}: key {key!r}: cannot read {value!r} as {_type_name(typ)}") from None
        if key in ENUMS and parsed not in ENUMS[key]:
            raise ConfigError(f"line {lineno}: key {key!r}: {parsed!r} not one of {ENUMS[key]}")
        values[section][fname] = parsed
    sections = {}
    for section, cls in SECTIONS.items():
        try:
            sections[section] = cls(**values[section])
        except (ValueError, TypeError) as exc:
            where = ", ".join(f"{k} (line {n})" for k, n in seen.items() if k.startswith(section + "."))
            raise ConfigError(f"invalid [{section}] settings {where or '(defaults)'}: {exc}") from None
    return RunConfig(**sections)


def _type_name(typ) -> str:
    return getattr(typ, "__name__", str(typ))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
