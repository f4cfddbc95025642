"""Plain-text ``key = value`` configuration with ``[section]`` headers.

Sections map onto the config dataclasses::

    [train]      TrainConfig scalars (epochs, batch_size, lr0, seed, mode, ...)
    [weights]    LossWeights (alpha, beta)
    [sparsity]   SparsityConfig (threshold_T, grid_d)
    [triplet]    TripletConfig (margin)
    [augment]    AugmentConfig
    [mapping]    MappingConfig (eta)
    [refine]     RefineConfig (iou_threshold)
    [synth]      SyntheticSceneConfig

Tuples are written comma-separated, e.g. ``downsample_scale_range = 0.5, 1.0``.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Optional

from ..augment import AugmentConfig
from ..core import ConfigError, LossWeights, MappingConfig, RefineConfig, SparsityConfig, TripletConfig
from ..train import TrainConfig
from .synth import SyntheticSceneConfig

NESTED = {"weights": LossWeights, "sparsity": SparsityConfig, "triplet": TripletConfig,
          "augment": AugmentConfig, "mapping": MappingConfig}


def _convert(raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (tuple, frozenset)):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if default and all(isinstance(v, (int, float)) for v in default):
            cast = type(next(iter(default)))
            parts = [float(p) if cast is float else int(p) for p in parts]
        return type(default)(parts)
    return raw


def _build(cls, section: dict[str, str], base=None, **extra):
    base = base if base is not None else cls()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _convert(raw, known[key])
    kwargs.update(extra)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_sections(path: Optional[Path]) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def train_config(sections: dict[str, dict[str, str]], **overrides) -> TrainConfig:
    nested = {key: _build(cls, sections.get(key, {})) for key, cls in NESTED.items()}
    cfg = _build(TrainConfig, sections.get("train", {}), **nested)
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def synth_config(sections: dict[str, dict[str, str]], **overrides) -> SyntheticSceneConfig:
    cfg = _build(SyntheticSceneConfig, sections.get("synth", {}))
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def refine_config(sections: dict[str, dict[str, str]]) -> RefineConfig:
    return _build(RefineConfig, sections.get("refine", {}))


def mapping_config(sections: dict[str, dict[str, str]]) -> MappingConfig:
    return _build(MappingConfig, sections.get("mapping", {}))


def dump_train_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the same format :func:`train_config` reads."""
    def fmt(v):
        if isinstance(v, (tuple, list, frozenset)):
            return ", ".join(str(x) for x in sorted(v, key=str)) if isinstance(v, frozenset) \
                else ", ".join(str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[train]"]
    for f in dataclasses.fields(cfg):
        if f.name not in NESTED:
            lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for key in NESTED:
        lines.append(f"\n[{key}]")
        sub = getattr(cfg, key)
        lines += [f"{f.name} = {fmt(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"
