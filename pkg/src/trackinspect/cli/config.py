"""Run configuration: flat key-value sections, typed and range-checked, unknown keys rejected."""

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

from .. import ConfigError


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    lo: float = None
    hi: float = None
    choices: tuple = None


INF = math.inf

SCHEMA = {
    "run": {"seed": Key(int, 0, 0)},
    "paths": {
        "data": Key(str, "data"),
        "checkpoints": Key(str, "checkpoints"),
        "reports": Key(str, "reports"),
    },
    "synth": {
        "strips": Key(int, 10, 1),
        "height": Key(int, 2048, 300),
        "train_ratio": Key(float, 0.8, 0, 1),
        "strips_per_mile": Key(int, 20, 1),
        "broken_rate": Key(float, 0.08, 0, 1),
        "missing_rate": Key(float, 0.05, 0, 1),
        "crumbling_rate": Key(float, 0.12, 0, 1),
        "chipped_rate": Key(float, 0.12, 0, 1),
        "difficult_rate": Key(float, 0.3, 0, 1),
        "turnout_rate": Key(float, 0.02, 0, 1),
        "covered_rate": Key(float, 0.02, 0, 1),
    },
    "data": {
        "material_per_class": Key(int, 400, 1),
        "windows_per_class": Key(int, 150, 1),
        "background_cap": Key(int, 400, 1),
        "min_fraction": Key(float, 0.6, 0, 1),
    },
    "net": {
        "c1": Key(int, 8, 1), "c2": Key(int, 16, 1), "c3": Key(int, 24, 1),
        "c4_fastener": Key(int, 48, 1),
        "n_svm": Key(int, 32, 24),
        "dropout_trunk": Key(float, 0.1, 0, 0.99),
        "dropout_fastener": Key(float, 0.2, 0, 0.99),
    },
    "train": {
        "iterations": Key(int, 1000, 0),
        "base_lr": Key(float, 0.01, 1e-8, 10),
        "lr_decay": Key(float, 0.5, 1e-6, 1),
        "lr_step": Key(int, 300, 1),
        "momentum": Key(float, 0.9, 0, 0.999),
        "weight_decay": Key(float, 5e-5, 0, 1),
        "batch_material": Key(int, 64, 0),
        "batch_coarse": Key(int, 8, 0),
        "batch_stl_material": Key(int, 32, 1),
        "difficult_fraction": Key(float, 0.5, 0, 1),
        "lambda_material": Key(float, 1.0, 0),
        "lambda_coarse": Key(float, 1.0, 0),
        "lambda_svm": Key(float, -1.0, -1.0),  # negative: 1/K per head
        "log_every": Key(int, 10, 1),
        "checkpoint_every": Key(int, 0, 0),
    },
    "decision": {
        "tau": Key(float, 0.1070),
        "tau_tie": Key(float, 0.0),
        "alpha": Key(float, 0.9, 0, 1),
        "beta": Key(float, 1.0, 0, 1),
    },
    "eval": {
        "subset": Key(str, "clear", choices=("clear", "clear-switches", "all")),
        "severity_levels": Key(str, "0,0.1,0.2"),
        "fp_rates": Key(str, "2,10"),
    },
}


def _convert(section, name, key, raw):
    try:
        if key.kind is int:
            value = int(raw)
        elif key.kind is float:
            value = float(raw)
            if math.isnan(value):
                raise ValueError
        else:
            value = str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {name}: cannot read {raw!r} as {key.kind.__name__}") from None
    if key.lo is not None and value < key.lo or key.hi is not None and value > key.hi:
        raise ConfigError(f"[{section}] {name} = {value} outside [{key.lo}, {key.hi}]")
    if key.choices and value not in key.choices:
        raise ConfigError(f"[{section}] {name} must be one of {key.choices}")
    return value


class RunConfig:
    """Section-keyed settings; attribute access as ``cfg.train["iterations"]``."""

    def __init__(self, values=None, base_dir="."):
        self.values = {s: {k: key.default for k, key in keys.items()} for s, keys in SCHEMA.items()}
        self.base_dir = Path(base_dir)
        for section, items in (values or {}).items():
            for name, raw in items.items():
                self.set(section, name, raw)
        self.validate()

    def set(self, section, name, raw):
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if name not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {name}")
        self.values[section][name] = _convert(section, name, SCHEMA[section][name], raw)

    def validate(self):
        d = self.values["decision"]
        if not d["alpha"] < d["beta"]:
            raise ConfigError("[decision] alpha must be below beta")
        s = self.values["synth"]
        if s["broken_rate"] + s["missing_rate"] > 1:
            raise ConfigError("[synth] broken_rate + missing_rate exceeds 1")
        for key in ("severity_levels", "fp_rates"):
            self.float_list("eval", key)
        for name in self.values["paths"]:
            parent = self.path(name).parent
            if not parent.is_dir():
                raise ConfigError(f"[paths] {name}: folder {parent} does not exist")

    def __getattr__(self, section):
        if section in SCHEMA:
            return self.values[section]
        raise AttributeError(section)

    def float_list(self, section, key):
        raw = self.values[section][key]
        try:
            vals = [float(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected comma-separated numbers") from None
        if not vals or any(v < 0 or math.isnan(v) for v in vals):
            raise ConfigError(f"[{section}] {key}: expected non-negative numbers")
        return vals

    def path(self, name):
        p = Path(self.values["paths"][name])
        return p if p.is_absolute() else self.base_dir / p

    def to_text(self):
        parser = configparser.ConfigParser()
        for section, items in self.values.items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in items.items()}
        from io import StringIO
        buf = StringIO()
        parser.write(buf)
        return buf.getvalue()


def load_config(path=None, overrides=None):
    """Read an INI file (sections and keys as in SCHEMA); relative paths resolve against its folder."""
    values = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = {s: dict(parser[s]) for s in parser.sections()}
        base = path.parent
    for (section, name), raw in (overrides or {}).items():
        values.setdefault(section, {})[name] = raw
    return RunConfig(values, base)
