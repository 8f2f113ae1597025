"""Flat ``key = value`` experiment configuration.

Every key has a type and a default; unknown keys are rejected.  A
``sweep.<key> = v1, v2, ...`` line declares a sweep over an ordinary key.
The resolved configuration round-trips through :func:`dump_config`.
"""

from __future__ import annotations

import math
from typing import Any

__all__ = ["ConfigError", "SCHEMA", "parse_config", "load_config", "dump_config", "apply_overrides"]


class ConfigError(ValueError):
    """Bad configuration text or values."""


def _int_list(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_or_inf(text: str) -> float:
    low = text.strip().lower()
    if low in ("inf", "off", "none"):
        return math.inf
    return float(low)


# key -> (parser, default).  Defaults describe the desk-scale study: synthetic
# 784-pixel patterns, 1200 per class with class 8 cut to 100, a 784-128-10
# MLP and DP-SGD with b=128, S=1, z=0.8, lr=0.05 for 30 epochs.
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "output_dir": (str, "runs/run"),
    # data
    "data.source": (str, "synthetic"),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "data.generator": (str, "patterns"),
    "data.classes": (int, 10),
    "data.per_class": (int, 1200),
    "data.test_per_class": (int, 300),
    "data.input_dim": (int, 784),
    "data.separation": (float, 5.0),
    "data.noise": (float, 0.5),
    "data.support": (int, 400),
    "data.pixel_keep": (float, 0.6),
    "data.amplitude": (float, 1.3),
    "data.blend": (str, "8:3,9"),
    "data.blend_share": (float, 0.7),
    # imbalance (keep < 0 disables)
    "imbalance.class": (int, 8),
    "imbalance.keep": (int, 100),
    # model
    "model": (str, "mlp"),
    "model.hidden": (_int_list, (128,)),
    # DP-SGD
    "dp.mode": (str, "clip_and_noise"),
    "dp.clip": (float, 1.0),
    "dp.noise_multiplier": (float, 0.8),
    "dp.sigma": (float, 0.8),
    "dp.batch_size": (int, 128),
    "dp.epochs": (int, 30),
    "dp.lr": (float, 0.05),
    "dp.optimizer": (str, "sgd"),
    "dp.delta": (float, 1e-6),
    "dp.accounting_n": (int, 0),
    "train.compare_baseline": (_bool, True),
    # evaluation
    "eval.grouping": (str, "label"),
    "eval.target": (int, -1),
    # federated
    "fed.participants": (int, 100),
    "fed.per_round": (int, 20),
    "fed.rounds": (int, 30),
    "fed.local_epochs": (int, 1),
    "fed.local_lr": (float, 0.1),
    "fed.local_batch": (int, 10),
    "fed.clip": (_float_or_inf, 1.0),
    "fed.noise_multiplier": (float, 1.0),
    "fed.global_lr": (float, 0.0),
    "fed.rare_classes": (_int_list, (8,)),
    "fed.rare_participants": (int, 2),
    # accountant-only queries
    "accountant.dataset_size": (int, 60000),
}


def _coerce(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw.strip()!r} ({exc})") from None


def parse_config(text: str) -> tuple[dict, tuple | None]:
    """Parse config text into ``(values, sweep)``.

    ``values`` contains only explicitly set keys; ``sweep`` is
    ``(key, [values...])`` or ``None``.
    """
    values: dict = {}
    sweep = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.startswith("sweep."):
            target = key[len("sweep."):]
            if sweep is not None and sweep[0] != target:
                raise ConfigError(f"line {lineno}: only one sweep parameter per config")
            items = [v for v in (s.strip() for s in _split_sweep(target, raw)) if v]
            if not items:
                raise ConfigError(f"line {lineno}: empty sweep list for {target}")
            sweep = (target, [_coerce(target, v) for v in items])
        else:
            values[key] = _coerce(key, raw)
    return values, sweep


def _split_sweep(key: str, raw: str) -> list[str]:
    # list-valued keys take ';' between sweep entries
    if SCHEMA.get(key, (None,))[0] is _int_list:
        return raw.split(";")
    return raw.split(",")


def apply_overrides(values: dict, overrides) -> dict:
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def resolve(values: dict) -> dict:
    """Fill defaults for every schema key."""
    out = {k: default for k, (_, default) in SCHEMA.items()}
    out.update(values)
    return out


def load_config(path, overrides=()) -> tuple[dict, tuple | None]:
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    else:
        text = ""
    values, sweep = parse_config(text)
    return resolve(apply_overrides(values, overrides)), sweep


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))
