"""Flat ``key = value`` configuration with typed keys and strict precedence.

Resolution order: built-in defaults < config file < command-line overrides.
Unknown keys are rejected. String defaults may reference other keys as
``{out_dir}``; they are expanded once everything else is resolved.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .errors import ConfigError


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def _str(s: str) -> str:
    return s


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _strs(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _choice(*options) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    parse.__name__ = "one of " + "|".join(options)
    return parse


@dataclass(frozen=True)
class Key:
    section: str
    parse: Callable[[str], Any]
    default: Optional[str]  # None: required by the commands that read it
    help: str = ""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


METHOD_NAMES = ("sat", "trades", "ard", "iad", "rslad", "mtard", "mmard")

SCHEMA: dict[str, Key] = {
    # output
    "out_dir": Key("output", _str, "runs", "root directory for every artifact"),
    "run_dir": Key("output", _str, "", "override the command's output directory"),
    "seed": Key("output", _int, "", "run seed; falls back to $MMARD_SEED, then 0"),
    # dataset
    "dataset": Key("dataset", _choice("moons", "blobs", "blobs_image"), "moons"),
    "n_train": Key("dataset", _int, "1024"),
    "n_test": Key("dataset", _int, "1000"),
    "noise": Key("dataset", _float, "0.1"),
    "classes": Key("dataset", _int, "4"),
    "per_class": Key("dataset", _int, "64"),
    "spacing": Key("dataset", _float, "1.0"),
    "data_seed": Key("dataset", _int, "", "defaults to seed"),
    "data_dir": Key("dataset", _str, "{out_dir}/data"),
    # teachers
    "mode": Key("teacher", _choice("natural", "sat", "trades"), "trades"),
    "teacher_hidden": Key("teacher", _ints, "128,128"),
    "teacher_channels": Key("teacher", _ints, "16,32"),
    "teacher": Key("teacher", _str, "{out_dir}/teacher_trades/best.ckpt"),
    "teacher_nat": Key("teacher", _str, "{out_dir}/teacher_natural/best.ckpt"),
    "teachers": Key("teacher", _strs, "", "capacity-ordered checkpoints for study-saturation"),
    "ladder": Key("teacher", _ints, "16,64,128,256", "hidden widths of the self-trained capacity ladder"),
    # method
    "method": Key("method", _choice(*METHOD_NAMES), None),
    "inner_override": Key("method", _choice("", *METHOD_NAMES), ""),
    "alpha": Key("method", _opt_float, "", "empty: the method's default"),
    "beta": Key("method", _float, "1.0"),
    "lam": Key("method", _float, "6.0"),
    "tau": Key("method", _float, "1.0"),
    "huber_delta": Key("method", _float, "1.0"),
    # attack
    "eps": Key("attack", _opt_float, "", "empty: eps_ratio * data margin"),
    "eps_ratio": Key("attack", _float, "0.25"),
    "step": Key("attack", _opt_float, "", "empty: eps / 4"),
    "train_steps": Key("attack", _int, "10"),
    "eval_steps": Key("attack", _int, "20"),
    "random_start": Key("attack", _float, "0.001"),
    # trainer
    "arch": Key("trainer", _choice("mlp", "smallcnn"), "mlp"),
    "student_hidden": Key("trainer", _ints, "64,64"),
    "student_channels": Key("trainer", _ints, "8,16"),
    "epochs": Key("trainer", _int, "60"),
    "batch_size": Key("trainer", _int, "64"),
    "lr": Key("trainer", _float, "0.1"),
    "momentum": Key("trainer", _float, "0.9"),
    "weight_decay": Key("trainer", _float, "0.0002"),
    "schedule": Key("trainer", _choice("auto", "cosine", "step"), "auto",
                    "auto: step decay for natural training, cosine otherwise"),
    "milestones": Key("trainer", _ints, "", "empty: 75% and 90% of the epochs"),
    "eval_every": Key("trainer", _int, "1"),
    # evaluation and studies
    "model": Key("evaluate", _str, "{out_dir}/distill/best.ckpt"),
    "attacks": Key("evaluate", _strs, "clean,fgsm,pgd_s,pgd_t,cw"),
    "methods": Key("study", _strs, "ard,rslad,mmard"),
    "outer_methods": Key("study", _strs, "ard,iad,rslad,mmard"),
    "alphas": Key("study", _floats, "0,0.5,1,2"),
    "study_epochs": Key("study", _int, "20"),
    "study_attacks": Key("study", _strs, "", "empty: the study's own column set"),
}


class Config:
    """Resolved, typed view over the flat key map."""

    def __init__(self, raw: dict):
        self.raw = dict(raw)
        self.values = {}
        for key, text in self.raw.items():
            if text is None:
                self.values[key] = None
                continue
            try:
                self.values[key] = SCHEMA[key].parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"key {key!r}: cannot parse {text!r} ({exc})", key=key) from None

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", key=key)
        return self.values[key]

    def require(self, *keys: str) -> None:
        for key in keys:
            if self.values.get(key) is None:
                raise ConfigError(f"missing required key {key!r}", key=key)

    def with_overrides(self, **overrides) -> "Config":
        raw = dict(self.raw)
        for k, v in overrides.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}", key=k)
            raw[k] = _fmt(v)
        return Config(raw)

    def dump(self) -> str:
        lines = []
        section = None
        for key, spec in SCHEMA.items():
            if spec.section != section:
                section = spec.section
                lines.append(f"# [{section}]")
            text = self.raw.get(key)
            if text is None:
                continue
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump(), encoding="utf-8")


def read_config_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'", key=key or None)
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}", key=key)
        out[key] = value.strip()
    return out


def parse_overrides(tokens: Iterable[str]) -> dict:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {tok!r} is not key=value", key=key or None)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", key=key)
        out[key] = value.strip()
    return out


def parse_config(path=None, overrides: Iterable[str] = (), env=None) -> Config:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    env = os.environ if env is None else env
    raw = {k: spec.default for k, spec in SCHEMA.items()}
    if path is not None:
        raw.update(read_config_file(path))
    raw.update(parse_overrides(overrides))
    if raw["seed"] == "":
        raw["seed"] = env.get("MMARD_SEED", "0")
    if raw["data_seed"] == "":
        raw["data_seed"] = raw["seed"]
    for key, text in raw.items():
        if isinstance(text, str) and "{" in text:
            try:
                raw[key] = text.format(**{k: v for k, v in raw.items() if isinstance(v, str)})
            except (KeyError, IndexError, ValueError) as exc:
                raise ConfigError(f"key {key!r}: cannot expand {text!r} ({exc})", key=key) from None
    return Config(raw)
