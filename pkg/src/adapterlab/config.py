"""Run configuration: shipped presets, deep-merge, and ``--key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import ConfigError

PRESETS = ("desk", "smoke", "paper")


def deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {PRESETS}")
    text = resources.files("adapterlab.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_preset(name: str = "desk") -> dict:
    """Presets other than ``desk`` are overlays on top of it."""
    cfg = _read_preset("desk")
    return cfg if name == "desk" else deep_merge(cfg, _read_preset(name))


def load_config(path=None, preset: str = "desk", overrides: Iterable[str] = ()) -> dict:
    cfg = load_preset(preset)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = deep_merge(cfg, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return apply_overrides(cfg, overrides)


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``key.sub=value`` strings (leading dashes allowed); values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        item = item.lstrip("-")
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like --key.path=value")
        key, raw = item.split("=", 1)
        parts = key.replace("-", "_").split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                if p in node and node[p] is not None:
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                node[p] = {}
            node = node[p]
        node[parts[-1]] = parse_value(raw)
    return cfg


def config_hash(cfg: dict, keys: Iterable[str] | None = None) -> str:
    part = cfg if keys is None else {k: cfg.get(k) for k in keys}
    blob = json.dumps(part, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def section(cfg: dict, *path: str) -> dict:
    node = cfg
    for p in path:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"config is missing section {'.'.join(path)}")
        node = node[p]
    return node
