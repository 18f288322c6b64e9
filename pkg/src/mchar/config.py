"""Flat ``key = value`` run configuration with typed parsing and unknown-key rejection."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Optional

RATE_KEYS = ("text_dropout", "image_dropout", "context_dropout", "motion_dropout")
PATH_KEYS = ("manifest", "clip_dir", "out_dir")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder_seed: int = 0
    # embedding widths
    d: int = 64
    d_txt: int = 64
    d_att: int = 32
    width: int = 64
    hidden: int = 256
    layers: int = 2
    # latent geometry
    frames: int = 16
    latent_size: int = 8
    channels: int = 4
    # conditioning weights
    lam: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    id_loss_gate: int = 25
    text_dropout: float = 0.05
    image_dropout: float = 0.05
    context_dropout: float = 0.5
    motion_dropout: float = 0.05
    # noise schedule
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimiser
    lr: float = 1e-3
    weight_decay: float = 0.01
    train_steps: int = 500
    batch: int = 1
    # generation
    gen_steps: int = 30
    guidance: float = 8.0
    # curation
    q_min: float = 0.5
    o_max: float = 0.1
    bin_width: float = 5.0
    # paths; empty means unset
    manifest: str = ""
    clip_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        for k in RATE_KEYS:
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{k} = {v} is not a rate in [0, 1]")
        for k in ("d", "d_txt", "d_att", "width", "hidden", "layers", "frames", "latent_size", "channels", "T",
                  "gen_steps", "batch"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be at least 1")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be non-negative")
        for k in ("lam", "alpha", "beta", "guidance", "lr", "weight_decay"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if not self.bin_width > 0:
            raise ConfigError("bin_width must be positive")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("schedule needs 0 < beta_start <= beta_end < 1")

    def validate_paths(self, *keys: str) -> None:
        """Check that the named path settings are set and exist."""
        for k in keys:
            p = getattr(self, k)
            if not p:
                raise ConfigError(f"{k} is not set")
            if k == "out_dir":
                parent = os.path.dirname(os.path.abspath(p))
                if not os.path.isdir(parent):
                    raise ConfigError(f"parent of {k} {p!r} does not exist")
            elif not os.path.exists(p):
                raise ConfigError(f"{k} {p!r} does not exist")

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: {key!r} set twice")
        values[key] = _coerce(key, types[key], raw)
    return replace(base or RunConfig(), **values)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
