"""Sectioned run configuration: INI text, typed defaults, unknown keys rejected."""
from __future__ import annotations

import configparser
import copy
import io
from typing import Any, Iterable

DEFAULTS: dict[str, dict[str, Any]] = {
    "corpus": {
        "n_langs": 4,
        "n_tokens": 12,
        "dim": 20,
        "divergence": 0.5,
        "transition_scale": 1.0,
        "emission_std": 2.0,
        "emission_divergence": 0.0,
        "dur_min": 3,
        "dur_max": 8,
        "min_frames": 300,
        "max_frames": 800,
        "n_train": 500,
        "n_valid": 50,
        "n_test": 100,
        "n_asr": 300,
        "asr_min_frames": 150,
        "asr_max_frames": 250,
        "crops": "100,200,300",
        "shift_offset": 0.5,
        "shift_noise": 0.5,
        "shift_rate": 1.25,
    },
    "model": {
        "enc_hidden": 64,
        "enc_dim": 64,
        "enc_layers": 2,
        "subsample": 2,
        "pred_embed": 32,
        "pred_hidden": 64,
        "pred_dim": 64,
        "joint_dim": 64,
        "head_width": 64,
    },
    "rnnt": {
        "epochs": 3,
        "batch_size": 8,
        "lr": 1e-3,
        "clip": 5.0,
        "max_utts": 0,
        "time_masks": 0,
        "max_time_mask": 10,
        "freq_masks": 0,
        "max_freq_mask": 3,
    },
    "lid": {
        "variant": "early",
        "lam": 1.0,
        "alpha": 0.3,
        "tau": 3,
        "freeze": "auto",
        "epochs": 2,
        "batch_size": 8,
        "lr": 1e-3,
        "clip": 5.0,
        "train_crop": 200,
        "time_masks": 1,
        "max_time_mask": 10,
        "freq_masks": 1,
        "max_freq_mask": 3,
    },
    "backend": {
        "lda_dim": 0,
        "mixtures": 1,
        "l2": 1e-3,
        "iters": 500,
    },
    "eval": {
        "p_target": 0.5,
    },
    "run": {
        "seed": 7,
        "jobs": 1,
    },
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _coerce(section: str, key: str, raw: Any) -> Any:
    default = DEFAULTS[section][key]
    if isinstance(raw, type(default)) and not isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from exc
    return text


class Config:
    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, kv in (values or {}).items():
            for key, raw in kv.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = _coerce(section, key, raw)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str) -> "Config":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            self.set(section.strip(), key.strip(), value)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, kv in self.values.items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in kv.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return copy.deepcopy(self.values)
