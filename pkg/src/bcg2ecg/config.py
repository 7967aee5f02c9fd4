"""Experiment configuration: flat ``section.key = value`` files plus flag overrides.

Example::

    # lab run
    paths.segments = data/lab.bin
    preprocess.step_s = 0.25
    model.d_model = 64
    train.lr = 1e-4
    cv.mode = segment
    seed = 7
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .beats import PeakConfig
from .preprocess import ConfigError, PreprocessConfig
from .training import TrainConfig
from .transformer import ModelConfig

SECTIONS = {
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "peaks": PeakConfig,
}

ALIASES = {
    "train.lr": "train.learning_rate",
    "train.batch": "train.batch_size",
    "model.layers": "model.n_layers",
    "model.heads": "model.n_heads",
    "preprocess.rate": "preprocess.target_rate_hz",
}


@dataclass
class ExperimentConfig:
    paths: dict[str, str] = field(default_factory=dict)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    peaks: PeakConfig = field(default_factory=PeakConfig)
    cv_mode: str = "segment"
    seed: int = 0

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)


def stage_seed(root: int, stage: str) -> int:
    """Deterministic per-stage seed derived from one root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[ALIASES.get(key, key)] = value
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def _coerce(value: Any, typ, key: str):
    if not isinstance(value, str):
        return value
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        if typ in (bool, "bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {getattr(typ, '__name__', typ)}") from None
    return value


def _build_section(name: str, cls, values: Mapping[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in fields:
            raise ConfigError(f"{name}.{k}", "unknown setting")
        kwargs[k] = _coerce(v, fields[k].type, f"{name}.{k}")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{name}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((k for k in fields if k in msg), None)
        raise ConfigError(f"{name}.{bad}" if bad else name, msg) from None


def build_config(flat: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a flat key/value mapping into an ExperimentConfig.

    Raises ConfigError naming the offending ``section.field``.
    """
    grouped: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    paths: dict[str, str] = {}
    cv_mode, seed = "segment", 0
    for key, value in flat.items():
        key = ALIASES.get(key, key)
        if value is None:
            continue
        if key == "seed":
            seed = _coerce(value, int, key)
            continue
        section, _, name = key.partition(".")
        if section == "paths":
            paths[name] = str(value)
        elif section == "cv" and name == "mode":
            cv_mode = str(value)
        elif section == "cv" and name == "seed":
            seed = _coerce(value, int, key)
        elif section in SECTIONS and name:
            grouped[section][name] = value
        else:
            raise ConfigError(key, "unknown setting")
    if cv_mode not in ("segment", "subject"):
        raise ConfigError("cv.mode", f"must be 'segment' or 'subject', got {cv_mode!r}")
    built = {s: _build_section(s, cls, grouped[s]) for s, cls in SECTIONS.items()}
    return ExperimentConfig(paths=paths, cv_mode=cv_mode, seed=seed, **built)
