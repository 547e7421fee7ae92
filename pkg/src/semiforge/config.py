"""``key = value`` config files mapped onto :class:`TrainConfig`.

Keys are the flat field names of ``TrainConfig`` and ``SemiHyper``; ``#``
starts a comment.  Unknown keys are errors so typos never pass silently.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .semi import ConfigError, SemiHyper
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> dict[str, tuple[str, type]]:
    out = {}
    for f in fields(TrainConfig):
        if f.name != "semi":
            out[f.name] = ("train", type(getattr(TrainConfig(), f.name)))
    for f in fields(SemiHyper):
        out[f.name] = ("semi", type(getattr(SemiHyper(), f.name)))
    return out


FIELD_TYPES = _field_types()


def _convert(key: str, raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def set_value(cfg: TrainConfig, key: str, raw: str) -> None:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    where, typ = FIELD_TYPES[key]
    target = cfg.semi if where == "semi" else cfg
    setattr(target, key, _convert(key, raw, typ))


def parse_config(text: str, cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = TrainConfig() if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        try:
            set_value(cfg, key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path, cfg: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), cfg)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        text = str(value).lower() if isinstance(value, bool) else repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
