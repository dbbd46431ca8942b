"""Run configuration files.

INI text with one section per concern::

    [run]       seed, out
    [data]      dataset (builtin name | spec file | synthetic), synthetic knobs
    [task]      L_in, L_pred, free_horizon
    [model]     TefnConfig fields except L_in/L_pred/C
    [train]     TrainConfig fields except seed
    [sweep] [robustness] [probe] [gradcheck] [efficiency] [export]

Any key can be overridden with ``section.key=value``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import BUILTIN_DATASETS
from .experiments import FORWARD_LENGTHS, HORIZONS, LR_GRID, S_GRID, TaskSpec
from .model import ConfigError


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _seed(v):
    n = int(v)
    if not 0 <= n < 2**64:
        raise ValueError("seed must be a u64")
    return n


def _list(conv):
    def parse(v):
        return tuple(conv(p) for p in str(v).replace(";", ",").split(",") if p.strip())

    return parse


SCHEMA = {
    "run": {"seed": _seed, "out": str},
    "data": {"dataset": str, "channels": int, "rows": int, "noise": float, "trend": float,
             "period": float},
    "task": {"L_in": int, "L_pred": int, "free_horizon": _bool},
    "model": {"S": int, "use_norm": _bool, "use_time_branch": _bool, "use_channel_branch": _bool,
              "bpa_mode": str, "fusion_mode": str, "activation": str, "eps": float,
              "linear_probe": _bool},
    "train": {"lr": float, "batch_size": int, "max_epochs": int, "patience": int,
              "lr_schedule": str},
    "sweep": {"lr_grid": _list(float), "S_grid": _list(int)},
    "robustness": {"protocol": str},
    "probe": {"horizons": _list(int)},
    "gradcheck": {"L_in": int, "L_pred": int, "C": int, "S_values": _list(int), "batch": int,
                  "step": float, "tol": float},
    "efficiency": {"iterations": int, "lengths": _list(int)},
    "export": {"checkpoint": str},
}

DEFAULTS = {
    "run": {"seed": 2024, "out": "runs"},
    "data": {"dataset": "synthetic"},
    "task": {"L_in": 96, "L_pred": 96, "free_horizon": False},
    "model": {},
    "train": {},
    "sweep": {"lr_grid": LR_GRID, "S_grid": S_GRID},
    "robustness": {"protocol": "retrain"},
    "probe": {"horizons": HORIZONS},
    "gradcheck": {"L_in": 8, "L_pred": 4, "C": 3, "S_values": (0, 1, 2), "batch": 3,
                  "step": 1e-5, "tol": 1e-4},
    "efficiency": {"iterations": 100, "lengths": FORWARD_LENGTHS},
    "export": {},
}

SYNTH_KEYS = ("channels", "rows", "noise", "trend", "period")


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.sections["run"]["out"])

    @property
    def dataset(self) -> str:
        ds = self.sections["data"]["dataset"]
        if ds == "synthetic" or ds in BUILTIN_DATASETS or Path(ds).is_absolute():
            return ds
        rel = self.base_dir / ds
        return str(rel) if rel.exists() else ds

    def task(self) -> TaskSpec:
        t = self.sections["task"]
        synth = {k: v for k, v in self.sections["data"].items() if k in SYNTH_KEYS}
        try:
            task = TaskSpec(
                dataset=self.dataset,
                L_in=t["L_in"],
                L_pred=t["L_pred"],
                model=dict(self.sections["model"]),
                train=dict(self.sections["train"]),
                seed=self.seed,
                synth=synth,
                free_horizon=t["free_horizon"] or self.dataset == "synthetic",
            )
            # validate eagerly so bad values fail before any work starts
            task.model_config(synth.get("channels", 1))
            task.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return task


def _convert(section, key, value):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        return SCHEMA[section][key](value)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse_override(text):
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    lhs, value = text.split("=", 1)
    section, key = lhs.split(".", 1)
    return section.strip(), key.strip(), value.strip()


def load_run_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    sections = {s: dict(v) for s, v in DEFAULTS.items()}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep L_in / S case
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser[section].items():
                sections.setdefault(section, {})[key] = _convert(section, key, value)
        base = path.parent
    for text in overrides:
        section, key, value = parse_override(text)
        sections.setdefault(section, {})[key] = _convert(section, key, value)
    if seed is not None:
        sections["run"]["seed"] = _convert("run", "seed", seed)
    if out is not None:
        sections["run"]["out"] = str(out)
    return RunConfig(sections, base)
