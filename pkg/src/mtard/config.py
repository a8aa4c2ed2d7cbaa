"""Run configuration: an INI file checked against a fixed schema.

Rational values such as ``epsilon = 8/255`` are stored as exact
:class:`fractions.Fraction` objects so they round-trip without decimal drift.
"""

import configparser
import hashlib
import io
import os
from fractions import Fraction

from .attacks import AttackConfig, eval_attacks
from .exceptions import ConfigError
from .trainer import MODES, TrainConfig

DATA_DIR_ENV = "MTARD_DATA_DIR"
DATA_KINDS = ("two-moons", "blobs", "idx", "cifar", "cache")

# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "mode": ("str", "mtard"),
        "seed": ("int", 0),
        "out": ("str", "runs/default"),
        "dtype": ("str", "float64"),
    },
    "data": {
        "kind": ("str", "two-moons"),
        "n_train": ("int", 1000),
        "n_test": ("int", 1000),
        "noise": ("fraction", Fraction(3, 20)),
        "n_classes": ("int", 2),
        "spread": ("fraction", Fraction(1)),
        "data_seed": ("int", 0),
        "train_path": ("str", ""),
        "train_labels_path": ("str", ""),
        "test_path": ("str", ""),
        "test_labels_path": ("str", ""),
        "subset": ("int", 0),
    },
    "model": {
        "arch": ("str", "mlp"),
        "student_hidden": ("intlist", (32, 32)),
        "teacher_hidden": ("intlist", (64, 64)),
        "student_channels": ("intlist", (8, 16)),
        "teacher_channels": ("intlist", (16, 32)),
        "kernel": ("int", 3),
    },
    "teachers": {
        "clean": ("str", ""),
        "robust": ("str", ""),
    },
    "optim": {
        "epochs": ("int", 60),
        "batch_size": ("int", 128),
        "lr": ("fraction", Fraction(1, 10)),
        "momentum": ("fraction", Fraction(9, 10)),
        "weight_decay": ("fraction", Fraction(2, 10000)),
        "lr_decay_epochs": ("intlist", (40, 50)),
        "lr_decay_factor": ("fraction", Fraction(1, 10)),
    },
    "attack": {
        "epsilon": ("fraction", Fraction(8, 255)),
        "step_size": ("fraction", Fraction(2, 255)),
        "steps": ("int", 10),
        "random_start": ("fraction", Fraction(1, 1000)),
    },
    "balance": {
        "tau_nat": ("fraction", Fraction(1)),
        "tau_adv": ("fraction", Fraction(1)),
        "tau_s": ("fraction", Fraction(1)),
        "tau_min": ("fraction", Fraction(1)),
        "tau_max": ("fraction", Fraction(10)),
        "r_tau": ("fraction", Fraction(1, 1000)),
        "beta": ("fraction", Fraction(1)),
        "r_w": ("fraction", Fraction(25, 1000)),
        "alpha": ("fraction", Fraction(1, 2)),
        "tau_squared": ("bool", False),
    },
    "eval": {
        "epsilon": ("fraction", Fraction(8, 255)),
        "select": ("str", "pgd_sat"),
        "steps": ("int", 20),
        "step_size": ("fraction", Fraction(2, 255)),
        "random_start": ("fraction", Fraction(1, 1000)),
        "pi_nat": ("fraction", Fraction(1, 2)),
        "pi_adv": ("fraction", Fraction(1, 2)),
        "suite": ("strlist", ("fgsm", "pgd_sat", "pgd_trades", "cw_inf")),
    },
}


def _parse_value(kind, text, field):
    text = text.strip()
    try:
        if kind == "str":
            return text
        if kind == "int":
            return int(text)
        if kind == "fraction":
            return Fraction(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "intlist":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "strlist":
            return tuple(t.strip() for t in text.split(",") if t.strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"cannot parse {text!r} as {kind}", field=field) from e
    raise AssertionError(kind)


def _format_value(kind, value):
    if kind in ("intlist", "strlist"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


class Config:
    """Typed view over the schema; ``cfg["attack"]["epsilon"]`` etc."""

    def __init__(self, values=None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, entries in (values or {}).items():
            for key, value in entries.items():
                self.set(section, key, value)

    def __getitem__(self, section):
        return self.values[section]

    def set(self, section, key, value):
        field = f"{section}.{key}"
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError("unknown configuration field", field=field)
        kind = SCHEMA[section][key][0]
        if isinstance(value, str) and kind != "str":
            value = _parse_value(kind, value, field)
        elif kind == "fraction":
            value = Fraction(value)
        elif kind in ("intlist", "strlist"):
            value = tuple(value)
        self.values[section][key] = value

    @classmethod
    def from_string(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config file: {e}") from e
        cfg = cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError("unknown section", field=section)
            for key, raw in parser.items(section):
                cfg.set(section, key, raw.strip())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_string(f.read())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e

    def to_string(self):
        buf = io.StringIO()
        for section, keys in SCHEMA.items():
            buf.write(f"[{section}]\n")
            for key, (kind, _) in keys.items():
                buf.write(f"{key} = {_format_value(kind, self.values[section][key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_string())

    def digest(self):
        """Content hash of the canonical serialization."""
        return hashlib.sha256(self.to_string().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values

    def validate(self):
        if self["run"]["mode"] not in MODES:
            raise ConfigError(f"must be one of {MODES}", field="run.mode")
        if self["data"]["kind"] not in DATA_KINDS:
            raise ConfigError(f"must be one of {DATA_KINDS}", field="data.kind")
        if self["model"]["arch"] not in ("mlp", "conv"):
            raise ConfigError("must be mlp or conv", field="model.arch")
        if self["eval"]["select"] not in self["eval"]["suite"] and self["eval"]["select"] not in eval_attacks():
            raise ConfigError("selection attack is not a known attack", field="eval.select")
        for name in self["eval"]["suite"]:
            if name not in eval_attacks():
                raise ConfigError(f"unknown attack {name!r}", field="eval.suite")
        if self["data"]["kind"] in ("idx", "cifar", "cache") and not self["data"]["train_path"]:
            raise ConfigError("dataset path is required for this data kind", field="data.train_path")
        if self["data"]["kind"] == "idx" and not self["data"]["train_labels_path"]:
            raise ConfigError("label file is required for IDX data", field="data.train_labels_path")
        try:
            self.train_config()
        except ConfigError as e:
            section = next((s for s, keys in SCHEMA.items() if e.field in keys), None)
            if section and e.field and "." not in e.field:
                raise ConfigError(str(e).split(": ", 1)[-1], field=f"{section}.{e.field}") from e
            raise

    def resolve_path(self, path):
        if not path or os.path.isabs(path):
            return path
        base = os.environ.get(DATA_DIR_ENV)
        return os.path.join(base, path) if base else path

    def training_attack(self):
        a = self["attack"]
        return AttackConfig(float(a["epsilon"]), float(a["step_size"]), a["steps"], float(a["random_start"]))

    def eval_suite(self):
        """Named evaluation attacks; ``pgd_sat`` follows the [eval] step settings."""
        e = self["eval"]
        eps = float(e["epsilon"])
        suite = eval_attacks(eps)
        suite["pgd_sat"] = AttackConfig(eps, float(e["step_size"]), e["steps"], float(e["random_start"]))
        return {name: suite[name] for name in dict.fromkeys(e["suite"] + (e["select"],))}

    def train_config(self):
        o, b, e = self["optim"], self["balance"], self["eval"]
        return TrainConfig(
            mode=self["run"]["mode"], epochs=o["epochs"], batch_size=o["batch_size"], seed=self["run"]["seed"],
            lr=float(o["lr"]), momentum=float(o["momentum"]), weight_decay=float(o["weight_decay"]),
            lr_decay_epochs=o["lr_decay_epochs"], lr_decay_factor=float(o["lr_decay_factor"]),
            attack=self.training_attack(),
            tau_nat=float(b["tau_nat"]), tau_adv=float(b["tau_adv"]), tau_s=float(b["tau_s"]),
            tau_min=float(b["tau_min"]), tau_max=float(b["tau_max"]), r_tau=float(b["r_tau"]),
            beta=float(b["beta"]), r_w=float(b["r_w"]), alpha=float(b["alpha"]), tau_squared=b["tau_squared"],
            dtype=self["run"]["dtype"],
            eval_attack=self.eval_suite()[e["select"]], eval_name=e["select"],
            pi_nat=float(e["pi_nat"]), pi_adv=float(e["pi_adv"]))
