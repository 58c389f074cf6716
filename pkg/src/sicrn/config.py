"""Run configuration: a line-based ``key = value`` file covering model, training and data.

Blank lines and ``#`` comments are ignored. Tuple values are comma separated.
Unknown keys are rejected. ``seed`` drives both model initialization and the
data stream. ``freq_bins`` follows ``win_length`` unless set explicitly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ArgumentError
from .model import SICRNConfig
from .training import TrainConfig

SHARED = {"seed"}
EXTRA_DEFAULTS = {"data_dir": ""}


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


MODEL_KEYS = _fields(SICRNConfig)
TRAIN_KEYS = _fields(TrainConfig)


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(type(default[0])(x) for x in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ArgumentError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass
class RunConfig:
    model: SICRNConfig = field(default_factory=SICRNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = ""

    def items(self) -> dict:
        out = {}
        out.update(self.model.to_dict())
        out.update(dataclasses.asdict(self.train))
        out["data_dir"] = self.data_dir
        return out


def documented_defaults() -> dict:
    """Every accepted key with its default value."""
    out = {k: _default(f) for k, f in MODEL_KEYS.items()}
    out.update({k: _default(f) for k, f in TRAIN_KEYS.items()})
    out.update(EXTRA_DEFAULTS)
    return out


def parse_assignments(lines) -> dict[str, str]:
    raw = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {num}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def build_run_config(raw: dict[str, str]) -> RunConfig:
    defaults = documented_defaults()
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ArgumentError(f"unknown config key {unknown[0]!r}")
    values = {k: _coerce(k, v, defaults[k]) for k, v in raw.items()}
    model_kw = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train_kw = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    train = TrainConfig(**train_kw)
    if "freq_bins" not in model_kw:
        model_kw["freq_bins"] = train.stft.n_bins
    model = SICRNConfig(**model_kw)
    if model.freq_bins != train.stft.n_bins:
        raise ArgumentError(f"config key 'freq_bins': {model.freq_bins} does not match "
                            f"win_length {train.win_length} ({train.stft.n_bins} bins)")
    return RunConfig(model, train, values.get("data_dir", ""))


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = parse_assignments(p.read_text().splitlines())
    raw.update(overrides or {})
    return build_run_config(raw)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def format_run_config(rc: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in rc.items().items())
