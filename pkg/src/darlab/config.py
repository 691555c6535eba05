"""Line-oriented ``key = value`` configuration files mapped onto TrainConfig."""
from __future__ import annotations

import dataclasses
import typing

from .backbone import ModelConfig
from .errors import ContractError
from .router import RouterConfig
from .train import TrainConfig

_SECTIONS = {"model": ModelConfig, "router": RouterConfig}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{no}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ContractError(f"{source}:{no}: empty key")
        out[key] = value
    return out


def read_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ContractError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config_text(text, path)


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    keys = []
    for cls in (ModelConfig, RouterConfig):
        keys += list(_field_types(cls))
    keys += [k for k in _field_types(TrainConfig) if k not in _SECTIONS]
    return keys


def _coerce(key: str, value: str, typ):
    try:
        if typ is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ContractError(f"bad value for {key}: {value!r}") from exc


def build_train_config(items: dict[str, str]) -> TrainConfig:
    """Resolve flat key/value pairs into a TrainConfig; unknown keys are rejected."""
    unknown = set(items) - set(known_keys())
    if unknown:
        raise ContractError(f"unknown config keys: {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        types = _field_types(cls)
        kw = {k: _coerce(k, items[k], types[k]) for k in types if k in items}
        sections[name] = cls(**kw)
    types = {k: v for k, v in _field_types(TrainConfig).items() if k not in _SECTIONS}
    kw = {k: _coerce(k, items[k], types[k]) for k in types if k in items}
    return TrainConfig(**sections, **kw)


def config_items(cfg: TrainConfig) -> dict[str, str]:
    """Flatten a TrainConfig into ordered string items (inverse of build_train_config)."""
    out: dict[str, str] = {}
    for name in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, name)):
            out[f.name] = _fmt(getattr(getattr(cfg, name), f.name))
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            out[f.name] = _fmt(getattr(cfg, f.name))
    return out


def model_router_items(model: ModelConfig, router: RouterConfig) -> dict[str, str]:
    out = {f.name: _fmt(getattr(model, f.name)) for f in dataclasses.fields(model)}
    out.update({f.name: _fmt(getattr(router, f.name)) for f in dataclasses.fields(router)})
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(items: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())
