#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Run configuration: model architecture, optimization, loss and data settings, read from a plain-text file of
`section.key = value` lines and overridden by `--section.key value` command line pairs.

File format: one assignment per line; `#` starts a comment; blank lines are ignored. Sequences are comma-separated,
booleans are `true`/`false`, and `none` clears an optional value. The environment variable ``C2FVL_SEED``, if set,
overrides ``train.seed`` (applied after the file, before command line overrides).
"""

from dataclasses import MISSING, dataclass, field, fields, is_dataclass
import hashlib
import logging
import os
from pathlib import Path

from c2fvl.errors import ConfigError
from c2fvl.losses import LossConfig
from c2fvl.model import ModelConfig
from c2fvl.training import TrainConfig
from c2fvl.zones import CONVENTIONS


logger = logging.getLogger(__name__)

SEED_VARIABLE = "C2FVL_SEED"
SECTIONS = ("data", "loss", "model", "train")


@dataclass
class DataConfig:
    """
    Parameters
    ----------
    dataset : str
        Dataset directory (see ``c2fvl.synth_data``).
    output : str
        Directory for checkpoints, histories and reports.
    convention : str
        Orientation convention of the images.
    """
    dataset: str = "data"
    output: str = "run"
    convention: str = "radiological"

    def validate(self):
        if self.convention not in CONVENTIONS:
            raise ValueError("Unknown orientation convention {!r}.".format(self.convention))


def _format_value(value):

    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text, type_):

    text = text.strip()
    if type_ is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError("not a boolean: {!r}".format(text))
    return type_(text)


def parse_value(text, type_, default):
    """
    Parse the text of a config value for a field of the given type (and default).

    Raises
    ------
    ValueError
        If the text cannot be parsed.
    """
    text = str(text).strip()
    if text.lower() == "none":
        if default is None:
            return None
        if type_ is not str:
            raise ValueError("the value may not be none")
    if type_ is tuple or isinstance(default, tuple):
        items = [item for item in text.split(",") if item.strip()]
        element_type = type(default[0]) if default else float
        return tuple(_parse_scalar(item, element_type) for item in items)
    return _parse_scalar(text, type_)


def _section_fields(obj):

    return {f.name: f for f in fields(obj) if not is_dataclass(getattr(obj, f.name))}


@dataclass
class RunConfig:
    """
    The complete configuration of a run. The "loss" section is stored in ``train.loss``.
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def loss(self):
        return self.train.loss

    def section(self, name):
        if name not in SECTIONS:
            raise ConfigError("Unknown config section {!r} (expected one of {}).".format(name, SECTIONS))
        return self.loss if name == "loss" else getattr(self, name)

    def set(self, key, value):
        """
        Set the value of a `section.key`; strings are parsed according to the field's type.

        Raises
        ------
        ConfigError
            If the key is unknown or the value malformed.
        """
        section_name, dot, name = key.partition(".")
        if not dot:
            raise ConfigError("Config keys have the form section.key, not {!r}.".format(key))
        section = self.section(section_name)
        known = _section_fields(section)
        if name not in known:
            raise ConfigError("Unknown config key: {}".format(key))
        default = known[name].default
        if default is MISSING or isinstance(default, tuple):
            default = getattr(section, name)
        try:
            if isinstance(value, str):
                value = parse_value(value, known[name].type, default)
            elif isinstance(value, list):
                value = tuple(value)
        except (TypeError, ValueError) as e:
            raise ConfigError("Malformed value for {}: {!r} ({})".format(key, value, e))
        setattr(section, name, value)

    def items(self):
        """
        Yield all `(section.key, value)` pairs, sorted by key.
        """
        pairs = []
        for section_name in SECTIONS:
            section = self.section(section_name)
            for name in _section_fields(section):
                pairs.append(("{}.{}".format(section_name, name), getattr(section, name)))
        return sorted(pairs)

    def validate(self):
        """
        Raise a ``ConfigError`` if the sections are invalid or do not fit together.
        """
        try:
            self.model.validate()
            self.train.validate()
            self.data.validate()
        except ValueError as e:
            raise ConfigError("Invalid configuration: {}".format(e))
        if self.loss.variant != "plain" and len(self.model.channels) != 4:
            raise ConfigError("Loss variant {} needs exactly 4 stages, the model has {}.".format(
                self.loss.variant, len(self.model.channels)))

    def dumps(self):
        """
        Canonical text form: one `section.key = value` line per field, sorted.
        """
        return "".join("{} = {}\n".format(key, _format_value(value)) for key, value in self.items())

    def fingerprint(self):
        """
        First 16 hex digits of the SHA-256 of the canonical text form.
        """
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]

    def to_dict(self):
        result = {}
        for key, value in self.items():
            section, _, name = key.partition(".")
            result.setdefault(section, {})[name] = list(value) if isinstance(value, tuple) else value
        return result

    @classmethod
    def from_dict(cls, values):
        """
        Rebuild a configuration from ``to_dict`` output.
        """
        cfg = cls()
        for section, entries in values.items():
            for name, value in entries.items():
                cfg.set("{}.{}".format(section, name), value)
        return cfg


def parse_lines(lines, source="<config>"):
    """
    Parse config file lines into `(key, value)` string pairs.
    """
    pairs = []
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise ConfigError("{}, line {}: expected 'section.key = value'.".format(source, number))
        pairs.append((key.strip(), value.strip()))
    return pairs


def loads(text, source="<config>"):
    """
    Build a ``RunConfig`` from the text of a config file (not validated).
    """
    cfg = RunConfig()
    for key, value in parse_lines(text.splitlines(), source):
        cfg.set(key, value)
    return cfg


def parse_overrides(tokens):
    """
    Turn command line tokens `["--train.learning_rate", "0.01", ...]` into `(key, value)` pairs.
    """
    tokens, pairs = list(tokens), []
    while tokens:
        flag = tokens.pop(0)
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError("Expected an override of the form --section.key, not {!r}.".format(flag))
        flag = flag[2:]
        if "=" in flag:
            key, _, value = flag.partition("=")
        elif tokens:
            key, value = flag, tokens.pop(0)
        else:
            raise ConfigError("Missing value for --{}.".format(flag))
        pairs.append((key, value))
    return pairs


def apply_environment(cfg, environ=None):
    """
    Apply ``C2FVL_SEED`` (if set) to ``train.seed``.
    """
    environ = os.environ if environ is None else environ
    seed = environ.get(SEED_VARIABLE)
    if seed is not None and seed.strip():
        try:
            cfg.train.seed = int(seed)
        except ValueError:
            raise ConfigError("{} must be an integer, not {!r}.".format(SEED_VARIABLE, seed))
        logger.debug("Seed %d from %s", cfg.train.seed, SEED_VARIABLE)
    return cfg


def load_run_config(path=None, overrides=(), environ=None):
    """
    Read a config file (or start from the defaults), apply the environment and the overrides, and validate.

    Parameters
    ----------
    path : str or pathlib.Path, optional
        Config file.
    overrides : sequence
        `(key, value)` pairs, e.g. from ``parse_overrides``.
    environ : mapping, optional
        Environment (default: ``os.environ``).

    Raises
    ------
    ConfigError
        If the file is missing or unreadable, or the configuration is invalid.
    """
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("Cannot read config file {}: {}".format(path, e))
        cfg = loads(text, source=str(path))
    apply_environment(cfg, environ)
    for key, value in overrides:
        cfg.set(key, value)
    cfg.validate()
    return cfg
