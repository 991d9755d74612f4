"""Run configuration: INI files with one section per module, presets and overrides.

Values are resolved in three layers: preset defaults, then the config file,
then command-line overrides.  Any section or key outside the schema is a
:class:`~ctbound.exceptions.ConfigurationError`, as is a value that does not
parse as the declared type.  :meth:`RunConfig.snapshot` writes the fully
resolved configuration back out so that every run directory is reproducible.
"""
from __future__ import annotations

import configparser
import copy
import dataclasses
import io
from pathlib import Path

from .exceptions import ConfigurationError
from .pipeline import DEFAULT_BOUNDARY_EPS
from .solver import SolverConfig
from .training import InitTrainConfig, RefineTrainConfig


def _dataclass_defaults(cls, prefix=""):
    return {prefix + f.name: f.default for f in dataclasses.fields(cls)}


SCHEMA = {
    "data": {"kind": "patches", "count": 2000, "height": 147, "width": 147, "channels": 1,
             "alpha_min": 2.0, "alpha_max": 10.0, "preset": "default", "max_shapes": 3,
             "seed": 0},
    "grid": {"patch_size": 21, "stride": 3},
    "init": {"width": 1.0, "upsample_size": 81, **_dataclass_defaults(InitTrainConfig)},
    "refine": {"d": 128, "layers": 8, "heads": 8, "d_ff": 256,
               **_dataclass_defaults(RefineTrainConfig)},
    "solver": _dataclass_defaults(SolverConfig),
    "eval": {"thresholds": "0,0.1,0.2", "binarize": 0.5, "boundary_eps": DEFAULT_BOUNDARY_EPS},
    "run": {"threads": 1},
}

# Desk preset: a narrower CNN and short schedules that finish on one CPU core.
PRESETS = {
    "paper": {},
    "desk": {
        "init": {"width": 0.25, "epochs": 50, "lr": 1e-3, "decay_every": 20},
        "refine": {"phase1_epochs": 100, "phase1_lr": 1e-4, "phase2_epochs": 1,
                   "lr_low": 1e-5, "lr_high": 2e-5, "cycle_epochs": 2.0, "batch_size": 8,
                   "crop_tokens": 12},
        "data": {"count": 2000},
    },
}


def _parse(value, default, where):
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        try:
            if isinstance(default, bool):
                if text.lower() in ("1", "true", "yes", "on"):
                    return True
                if text.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if isinstance(default, int):
                return int(text)
            return float(text)
        except ValueError:
            raise ConfigurationError(
                f"{where}: cannot parse {value!r} as {type(default).__name__}") from None
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
        if value != int(value):
            raise ConfigurationError(f"{where}: expected an integer, got {value}")
        return int(value)
    return value


class RunConfig:
    """Resolved configuration, addressable as ``config["init"]["lr"]``."""

    def __init__(self, preset="desk"):
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        self.preset = preset
        self.values = copy.deepcopy(SCHEMA)
        self.update(PRESETS[preset])

    def __getitem__(self, section):
        return self.values[section]

    def update(self, overrides, source="override"):
        """Apply ``{section: {key: value}}``; strings are parsed to the schema type."""
        for section, entries in overrides.items():
            if section not in SCHEMA:
                raise ConfigurationError(f"{source}: unknown section [{section}]")
            for key, value in entries.items():
                if key not in SCHEMA[section]:
                    raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}]")
                self.values[section][key] = _parse(value, SCHEMA[section][key],
                                                   f"{source} [{section}] {key}")
        return self

    def set(self, dotted, value):
        """``set("init.lr", "1e-3")``, as used by ``--set`` flags."""
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override {dotted!r} must look like section.key=value")
        return self.update({section: {key: value}}, "--set")

    @classmethod
    def load(cls, path=None, preset="desk", overrides=()):
        config = cls(preset)
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
            except configparser.Error as exc:
                raise ConfigurationError(f"malformed config {path}: {exc}") from exc
            sections = {s: dict(parser[s]) for s in parser.sections()}
            # snapshots record the preset they came from; every value is explicit anyway
            recorded = sections.get("run", {}).pop("preset", None)
            if recorded is not None:
                if recorded not in PRESETS:
                    raise ConfigurationError(f"{path}: unknown preset {recorded!r}")
                config.preset = recorded
            config.update(sections, str(path))
        for item in overrides:
            dotted, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} must look like section.key=value")
            config.set(dotted.strip(), value)
        return config

    def snapshot(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["run"] = {"preset": self.preset}
        for section, entries in self.values.items():
            parser[section] = {**(parser[section] if section in parser else {}),
                               **{k: repr(v) if isinstance(v, float) else str(v)
                                  for k, v in entries.items()}}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.snapshot())

    # typed views -------------------------------------------------------------

    def _pick(self, section, cls):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in self.values[section].items() if k in names})

    def init_train(self):
        return self._pick("init", InitTrainConfig)

    def refine_train(self):
        return self._pick("refine", RefineTrainConfig)

    def solver(self):
        return self._pick("solver", SolverConfig)

    def thresholds(self):
        text = self.values["eval"]["thresholds"]
        try:
            values = tuple(float(t) for t in str(text).split(",") if t.strip())
        except ValueError:
            raise ConfigurationError(f"[eval] thresholds: cannot parse {text!r}") from None
        if not values or any(t < 0 for t in values):
            raise ConfigurationError(f"[eval] thresholds must be non-negative, got {text!r}")
        return values

    def alpha_range(self):
        return (self.values["data"]["alpha_min"], self.values["data"]["alpha_max"])

    def init_hparams(self, channels):
        return {"kind": "init", "channels": channels,
                "patch_size": self.values["grid"]["patch_size"],
                "upsample_size": self.values["init"]["upsample_size"],
                "width": self.values["init"]["width"]}

    def refine_hparams(self, channels):
        r = self.values["refine"]
        return {"kind": "refine", "channels": channels,
                "patch_size": self.values["grid"]["patch_size"],
                "d": r["d"], "layers": r["layers"], "heads": r["heads"], "d_ff": r["d_ff"]}
