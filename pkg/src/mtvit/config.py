"""Run configuration: flat-sectioned key=value text with strict typing.

Every key belongs to a section whose schema comes from the owning
module's dataclass; unknown sections or keys are rejected, values are
parsed strictly by declared type, omitted keys take their defaults, and
the effective configuration can be echoed back to disk such that
re-parsing it is a fixed point.
"""

from __future__ import annotations

import configparser
import hashlib
import re
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .caption import CaptionConfig
from .data import VOCAB
from .errors import ConfigError
from .losses import LossWeights
from .model import DepthHeadConfig, SegHeadConfig
from .probe import ProbeConfig
from .trainer import TrainConfig

_INT_RE = re.compile(r"^[+-]?\d+$")


@dataclass(frozen=True)
class RunSection:
    output_dir: str = "runs/out"
    seed: int = 0

    def validate(self, key_prefix: str = "run") -> None:
        if not self.output_dir:
            raise ConfigError(f"{key_prefix}.output_dir", "must not be empty")
        if self.seed < 0:
            raise ConfigError(f"{key_prefix}.seed", "must be >= 0")


@dataclass(frozen=True)
class DataSection:
    warmup_dir: str = ""
    cap_dir: str = ""
    depth_dir: str = ""
    seg_dir: str = ""
    probe_fit_dir: str = ""
    probe_eval_dir: str = ""
    eval_dir: str = ""

    def validate(self, key_prefix: str = "data") -> None:
        pass


@dataclass(frozen=True)
class GenSection:
    dir: str = ""
    n: int = 2000
    split: str = "train"
    side: int = 32

    def validate(self, key_prefix: str = "gen") -> None:
        if self.n < 1:
            raise ConfigError(f"{key_prefix}.n", "must be >= 1")
        if self.side < 4:
            raise ConfigError(f"{key_prefix}.side", "must be >= 4")


@dataclass(frozen=True)
class ProbeSection(ProbeConfig):
    checkpoint: str = ""


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "backbone": BackboneConfig,
    "caption": CaptionConfig,
    "depth_head": DepthHeadConfig,
    "seg_head": SegHeadConfig,
    "losses": LossWeights,
    "train": TrainConfig,
    "data": DataSection,
    "probe": ProbeSection,
    "gen": GenSection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection
    backbone: BackboneConfig
    caption: CaptionConfig
    depth_head: DepthHeadConfig
    seg_head: SegHeadConfig
    losses: LossWeights
    train: TrainConfig
    data: DataSection
    probe: ProbeSection
    gen: GenSection


def _schema(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse_value(raw: str, to_type, key: str):
    raw = raw.strip()
    if to_type is int:
        if not _INT_RE.match(raw):
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return int(raw)
    if to_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(key, f"expected a number, got {raw!r}") from exc
    if to_type is str:
        return raw
    origin = typing.get_origin(to_type)
    if origin is tuple:
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    raise ConfigError(key, f"unsupported config type {to_type!r}")


def _render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def default_config() -> RunConfig:
    return RunConfig(**{name: cls() for name, cls in SECTIONS.items()})


def _validate(cfg: RunConfig) -> RunConfig:
    for name in SECTIONS:
        getattr(cfg, name).validate(name)
    if cfg.caption.vocab_size < len(VOCAB):
        raise ConfigError("caption.vocab_size",
                          f"must cover the generator vocabulary of {len(VOCAB)} tokens")
    return cfg


def parse_config(path) -> RunConfig:
    """Parse and fully validate a configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file: {path}")
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed file: {exc}") from exc

    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        schema = _schema(SECTIONS[section])
        out = {}
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{section}.{key}", "unknown key")
            out[key] = _parse_value(raw, schema[key], f"{section}.{key}")
        values[section] = out
    cfg = RunConfig(**{name: cls(**values.get(name, {})) for name, cls in SECTIONS.items()})
    return _validate(cfg)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form of the effective (post-default) configuration."""
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(cls):
            lines.append(f"{f.name} = {_render_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def write_effective(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(cfg))


def fingerprint(cfg: RunConfig) -> str:
    """Hex digest identifying the effective configuration."""
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()
