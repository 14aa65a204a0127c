"""Run configuration: a JSON document with ``model``, ``train`` and ``data`` sections.

Every key is checked against :data:`SCHEMA` before any work starts; unknown
keys and type mismatches raise :class:`ConfigError` naming the dotted key.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import SuperpositionSpec
from .models import DEFAULT_QK_INIT_SCALE
from .training import TrainConfig

# key -> (allowed types, default)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], object]]] = {
    "model": {
        "architecture": ((str,), "attn"),
        "activation": ((str,), "sparsemax"),
        "d": ((int,), 32),
        "M": ((int,), 128),
        "k": ((int,), 32),
        "bandwidth": ((float, int), 1e-3),
        "output_gain": ((bool,), False),
        "qk_init_scale": ((float, int), DEFAULT_QK_INIT_SCALE),
    },
    "train": {
        "learning_rate": ((float, int), 3e-4),
        "beta1": ((float,), 0.9),
        "beta2": ((float,), 0.99),
        "eps_adam": ((float,), 1e-8),
        "batch_size": ((int,), 32),
        "total_samples": ((int,), 200_000),
        "lambda": ((float, int), 1e-3),
        "dead_window": ((int,), 10_000),
        "log_every": ((int,), 100),
        "grad_clip": ((float, int, type(None)), None),
        "record_wallclock": ((bool,), False),
    },
    "data": {
        "source": ((str,), "synthetic"),
        "path": ((str, type(None)), None),
        "eval_path": ((str, type(None)), None),
        "truth_path": ((str, type(None)), None),
        "m_true": ((int,), 64),
        "mean_active": ((float, int), 3.0),
        "magnitude_lo": ((float, int), 0.5),
        "magnitude_hi": ((float, int), 1.5),
        "n_samples": ((int,), 200_000),
        "eval_samples": ((int,), 5_000),
    },
}
TOP_LEVEL: dict[str, tuple[tuple[type, ...], object]] = {
    "seed": ((int,), 0),
    "output_dir": ((str, type(None)), None),
}


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    cfg = {key: default for key, (_, default) in TOP_LEVEL.items()}
    for section, keys in SCHEMA.items():
        cfg[section] = {key: default for key, (_, default) in keys.items()}
    return cfg


def _check_type(dotted: str, value, types: tuple[type, ...]) -> object:
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{dotted}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if isinstance(value, int) and not isinstance(value, bool) and float in types and int not in types:
        return float(value)
    if not isinstance(value, types):
        raise ConfigError(f"{dotted}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def merge(doc: dict) -> dict:
    """Validate ``doc`` and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    cfg = defaults()
    for key, value in doc.items():
        if key in TOP_LEVEL:
            cfg[key] = _check_type(key, value, TOP_LEVEL[key][0])
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object")
            for sub, subval in value.items():
                dotted = f"{key}.{sub}"
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"unknown config key {dotted!r}")
                cfg[key][sub] = _check_type(dotted, subval, SCHEMA[key][sub][0])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg: dict) -> None:
    m, t, d = cfg["model"], cfg["train"], cfg["data"]
    if d["source"] not in ("synthetic", "file"):
        raise ConfigError(f"data.source: expected 'synthetic' or 'file', got {d['source']!r}")
    if d["source"] == "file" and not d["path"]:
        raise ConfigError("data.path: required when data.source is 'file'")
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    try:
        train_config(cfg)
        if d["source"] == "synthetic":
            superposition_spec(cfg).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if m["d"] < 1 or m["M"] < m["d"]:
        raise ConfigError(f"model.M: need M >= d >= 1, got d={m['d']}, M={m['M']}")


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings (dotted keys, JSON-parsed values) to a raw document."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if len(parts) == 1:
            doc[parts[0]] = value
        elif len(parts) == 2:
            section = doc.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"{parts[0]}: expected an object")
            section[parts[1]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return doc


def load(path, overrides: list[str] | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return merge(apply_overrides(doc, overrides or []))


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps_adam=t["eps_adam"],
        batch_size=t["batch_size"],
        total_samples=t["total_samples"],
        lam=float(t["lambda"]),
        k=cfg["model"]["k"],
        seed=cfg["seed"],
        dead_window=t["dead_window"],
        log_every=t["log_every"],
        grad_clip=None if t["grad_clip"] is None else float(t["grad_clip"]),
        record_wallclock=t["record_wallclock"],
    )


def superposition_spec(cfg: dict) -> SuperpositionSpec:
    d = cfg["data"]
    return SuperpositionSpec(
        d=cfg["model"]["d"],
        m_true=d["m_true"],
        mean_active=float(d["mean_active"]),
        magnitude_lo=float(d["magnitude_lo"]),
        magnitude_hi=float(d["magnitude_hi"]),
        seed=cfg["seed"],
    )
