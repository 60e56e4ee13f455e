"""Flat ``section.key = value`` run configuration.

File format: one ``section.key = value`` per line, ``#`` starts a comment,
blank lines are ignored. Sections are ``encoder``, ``projector``, ``lm``,
``synth``, ``train`` and ``paths``; keys are the dataclass field names.
Tuples are written comma-separated (``train.betas = 0.9, 0.999``).
Precedence: command-line overrides > file > defaults. Unknown keys and
values that fail validation are rejected before anything runs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .encoders import EncoderConfig
from .projectors import ProjectorConfig
from .synth import SynthConfig
from .trainer import LMConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    out: str = "out"
    media_root: str = ""
    init: str = ""
    resume: str = ""


_SECTIONS = {
    "encoder": EncoderConfig,
    "projector": ProjectorConfig,
    "lm": LMConfig,
    "synth": SynthConfig,
    "train": TrainConfig,
    "paths": PathsConfig,
}

# fields filled from other sections or owned by the pipeline, not settable directly
_DERIVED = {
    "projector.d_vision",
    "projector.d_audio",
    "projector.d_model",
    "projector.audio_len",
    "lm.max_seq",
    "train.freeze",
    "train.stage",
}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_stage(self, stage: str) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, stage=stage, freeze=None))

    def flat(self) -> Dict[str, object]:
        out = {}
        for sec in _SECTIONS:
            for f in dataclasses.fields(getattr(self, sec)):
                key = f"{sec}.{f.name}"
                if key not in _DERIVED:
                    out[key] = getattr(getattr(self, sec), f.name)
        return out


def allowed_keys() -> Tuple[str, ...]:
    keys = []
    for sec, cls in _SECTIONS.items():
        keys.extend(f"{sec}.{f.name}" for f in dataclasses.fields(cls) if f"{sec}.{f.name}" not in _DERIVED)
    return tuple(keys)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        if default is None:
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from e
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_run_config(file_values: Mapping[str, str] = {}, overrides: Mapping[str, str] = {}) -> RunConfig:
    merged = dict(file_values)
    merged.update(overrides)
    allowed = set(allowed_keys())
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    per_section: Dict[str, Dict[str, object]] = {s: {} for s in _SECTIONS}
    defaults = {s: cls() for s, cls in _SECTIONS.items() if s != "projector"}
    for key, raw in merged.items():
        sec, name = key.split(".", 1)
        default = getattr(defaults[sec], name) if sec in defaults else getattr(ProjectorConfig(), name)
        per_section[sec][name] = _coerce(key, str(raw), default)
    try:
        enc = EncoderConfig(**per_section["encoder"])
        lm = LMConfig(**per_section["lm"])
        proj = ProjectorConfig(
            d_vision=enc.image_dim,
            d_audio=enc.audio_dim,
            d_model=lm.d_model,
            audio_len=enc.audio_positions,
            **per_section["projector"],
        )
        synth = SynthConfig(**per_section["synth"])
        train = TrainConfig(**per_section["train"])
        paths = PathsConfig(**per_section["paths"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    # one knob: the training context also sizes the position table
    lm = dataclasses.replace(lm, max_seq=train.max_seq)
    return RunConfig(enc, proj, lm, synth, train, paths)


def load_run_config(path: Optional[str] = None, overrides: Mapping[str, str] = {}) -> RunConfig:
    values: Dict[str, str] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            values = parse_config_text(f.read(), path)
    return build_run_config(values, overrides)


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
