"""Run configuration: one sectioned key=value file covering every module,
with each key overridable by a command-line flag of the same dotted name
(e.g. ``--transformer.d_model``).

Defaults carry the reference recipe: 80 mel bins at 25/10 ms, stacking 4 /
downsampling 3, a 4-layer 8-head d_model=512 d_inner=2048 encoder, SGD with
momentum 0.8 at lr 0.001, mini-batches of 10, plateau LR halving.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, fields, replace

from .errors import ConfigError, MissingFileError
from .features import FrontendConfig
from .models import CnnConfig, TransformerConfig
from .training import TrainConfig


@dataclass
class EvalSettings:
    rtf_repeats: int = 5
    rtf_duration_seconds: float = 30.0

    def __post_init__(self):
        if self.rtf_repeats < 1:
            raise ConfigError(f"rtf_repeats must be >= 1, got {self.rtf_repeats}")


@dataclass
class RunConfig:
    frontend: FrontendConfig
    transformer: TransformerConfig
    cnn: CnnConfig
    train: TrainConfig
    eval: EvalSettings


# input_dim is derived from the frontend, never configured directly
_SECTIONS = {
    "frontend": (FrontendConfig, ()),
    "transformer": (TransformerConfig, ("input_dim",)),
    "cnn": (CnnConfig, ("input_dim",)),
    "train": (TrainConfig, ()),
    "eval": (EvalSettings, ()),
}


def _section_keys(section: str) -> list[str]:
    cls, excluded = _SECTIONS[section]
    return [f.name for f in fields(cls) if f.name not in excluded]


def iter_keys():
    """All (section, key) pairs, for registering CLI override flags."""
    for section in _SECTIONS:
        for key in _section_keys(section):
            yield section, key


def _parse_value(section: str, key: str, text: str, template):
    text = text.strip()
    try:
        if isinstance(template, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(template, tuple):
            return tuple(int(v) for v in text.split(",") if v != "")
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(
            f"bad value for {section}.{key}: {text!r}") from None


def default_config() -> RunConfig:
    frontend = FrontendConfig()
    return RunConfig(
        frontend=frontend,
        transformer=TransformerConfig(input_dim=frontend.stacked_dim),
        cnn=CnnConfig(input_dim=frontend.n_mels),
        train=TrainConfig(),
        eval=EvalSettings(),
    )


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, optionally updated from an INI-style file, then from
    ``{"section.key": "value"}`` overrides. Unknown keys are rejected."""
    values: dict[tuple[str, str], str] = {}
    if path is not None:
        if not os.path.exists(path):
            raise MissingFileError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in _section_keys(section):
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                values[(section, key)] = value
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or key not in _section_keys(section):
            raise ConfigError(f"unknown config key {dotted!r}")
        values[(section, key)] = value

    defaults = default_config()
    built = {}
    for section, (cls, _) in _SECTIONS.items():
        template = getattr(defaults, section)
        kwargs = {}
        for key in _section_keys(section):
            if (section, key) in values:
                kwargs[key] = _parse_value(section, key, values[(section, key)],
                                           getattr(template, key))
        try:
            built[section] = replace(template, **kwargs)
        except ConfigError:
            raise
    frontend = built["frontend"]
    built["transformer"] = replace(built["transformer"],
                                   input_dim=frontend.stacked_dim)
    built["cnn"] = replace(built["cnn"], input_dim=frontend.n_mels)
    return RunConfig(**built)


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration as INI text; feeding it back reproduces cfg."""
    out = io.StringIO()
    for section in _SECTIONS:
        out.write(f"[{section}]\n")
        obj = getattr(cfg, section)
        for key in _section_keys(section):
            value = getattr(obj, key)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            out.write(f"{key} = {text}\n")
        out.write("\n")
    return out.getvalue()


# Stream ids for counter-based rng derivation: every command derives its
# generators as default_rng([seed, STREAM_*]) so one --seed drives the
# whole pipeline reproducibly.
STREAM_GENERATE = 0
STREAM_MODEL_INIT = 1
STREAM_TRAIN_SHUFFLE = 2
STREAM_BENCHMARK = 3


def derive_rng(seed: int, stream: int):
    import numpy as np
    return np.random.default_rng([seed, stream])
