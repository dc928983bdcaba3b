"""Flat ``section.key = value`` run configuration.

Blank lines and lines starting with ``#`` or ``;`` are ignored.  Every key
must belong to a known section; unknown keys are rejected with their line
number.  See ``docs/config.md`` for the schema.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .evaluate import RollingProtocol
from .exceptions import ConfigurationError
from .extractor import ExtractorConfig
from .simulate import SimulationConfig
from .train import ModelConfig, TrainingConfig

PATH_KEYS = ("obs", "sites", "maps", "model", "out")
INPUT_PATHS = ("obs", "sites", "maps", "model")
SECTIONS = {
    "model": ModelConfig,
    "extractor": ExtractorConfig,
    "training": TrainingConfig,
    "protocol": RollingProtocol,
    "simulate": SimulationConfig,
}
NONE_WORDS = {"none", "auto", "null", ""}


@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    protocol: RollingProtocol = field(default_factory=RollingProtocol)
    simulate: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int | None = None

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Copy with every component seed set to ``seed`` (no-op for None)."""
        if seed is None:
            return self
        return dataclasses.replace(
            self, seed=seed,
            extractor=dataclasses.replace(self.extractor, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
            simulate=dataclasses.replace(self.simulate, seed=seed))


def _parse_scalar(text: str, like, key: str, lineno: int):
    t = text.strip()
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float) or like is None:
            return float(t)
        return t
    except ValueError as exc:
        raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from None


def _parse_value(text: str, default, key: str, lineno: int):
    if default is None:
        return None if text.strip().lower() in NONE_WORDS else _parse_scalar(text, None, key, lineno)
    if isinstance(default, (list, tuple)):
        if default and isinstance(default[0], (list, tuple)):
            rows = [r for r in text.split(";") if r.strip()]
            return [[_parse_scalar(x, default[0][0], key, lineno) for x in r.replace(",", " ").split()]
                    for r in rows]
        like = default[0] if default else ""
        items = [x for x in text.split(",") if x.strip()]
        out = [_parse_scalar(x, like, key, lineno) for x in items]
        return tuple(out) if isinstance(default, tuple) else out
    return _parse_scalar(text, default, key, lineno)


def _defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def parse_config(text: str, base_dir: Path | None = None, check_paths: bool = True) -> RunConfig:
    values = {s: {} for s in SECTIONS}
    paths = {}
    seed = None
    defaults = {s: _defaults(c) for s, c in SECTIONS.items()}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', found {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate key {key} (first set on line {seen[key]})")
        seen[key] = lineno
        if key == "seed":
            seed = _parse_scalar(val, 0, key, lineno)
            continue
        section, _, name = key.partition(".")
        if section == "paths" and name in PATH_KEYS:
            p = Path(val)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            paths[name] = str(p)
            continue
        if section not in SECTIONS or name not in defaults[section]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(val, defaults[section][name], key, lineno)
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid [{section}] settings: {exc}") from exc
    if check_paths:
        for name in INPUT_PATHS:
            if name in paths and not Path(paths[name]).exists():
                raise ConfigurationError(f"line {seen['paths.' + name]}: paths.{name} does not exist: {paths[name]}")
    cfg = RunConfig(paths=paths, seed=seed, **built)
    return cfg.with_seed(seed)


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        return parse_config(text, path.parent, check_paths)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def dump_config(cfg: RunConfig) -> str:
    """Render a configuration back to the flat format."""
    def fmt(v):
        if v is None:
            return "auto"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            if v and isinstance(v[0], (list, tuple)):
                return "; ".join(" ".join(repr(x) for x in row) for row in v)
            return ", ".join(str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    if cfg.seed is not None:
        lines.append(f"seed = {cfg.seed}")
    for k, v in cfg.paths.items():
        lines.append(f"paths.{k} = {v}")
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
