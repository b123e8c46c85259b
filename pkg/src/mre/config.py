"""Model and training configuration, with plain ``key=value`` file support."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("entity-aware", "plain-sp", "indicator-input", "posemb-final", "sentence-vector")
PASS_MODES = ("one-pass", "per-pair")
HEAD_TYPES = ("linear", "mlp", "biaffine")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 200
    max_len: int = 64
    k: int = 4
    n_labels: int = 4
    head: str = "linear"
    variant: str = "entity-aware"
    pass_mode: str = "one-pass"
    seed: int = 0
    share_bias_layers: bool = True
    ln_eps: float = 1e-12
    norm_order: str = "post"
    attn_scale: str = "per-head"

    def __post_init__(self):
        self.validate()

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.pass_mode not in PASS_MODES:
            raise ConfigError(f"unknown pass mode {self.pass_mode!r}")
        if self.head not in HEAD_TYPES:
            raise ConfigError(f"unknown head type {self.head!r}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.layers < 0 or self.d_ff < 1 or self.vocab_size < 1 or self.max_len < 1:
            raise ConfigError("layers/d_ff/vocab_size/max_len out of range")
        if self.n_labels < 2:
            raise ConfigError("need NA plus at least one relation label")
        if self.variant == "posemb-final":
            if self.pass_mode != "per-pair":
                raise ConfigError("posemb-final re-runs the last layer per pair; use --mode per-pair")
            if self.layers < 1:
                raise ConfigError("posemb-final needs at least one layer")
        if self.norm_order != "post" or self.attn_scale != "per-head":
            raise ConfigError("only post-norm ordering and per-head scaling are implemented")

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self)]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "ModelConfig | None" = None) -> "ModelConfig":
        base = base or cls()
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _parse(raw, type(getattr(base, key)), key)
        return dataclasses.replace(base, **kw)


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.threads < 1:
            raise ConfigError("epochs/batch_size/lr/threads out of range")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.clip_norm <= 0:
            raise ConfigError("moment coefficients must lie in [0, 1) and clip_norm > 0")

    def to_lines(self) -> list[str]:
        return [f"{f.name}={_fmt(getattr(self, f.name))}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "TrainSpec | None" = None) -> "TrainSpec":
        base = base or cls()
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown training key {key!r}")
            kw[key] = _parse(raw, type(getattr(base, key)), key)
        return dataclasses.replace(base, **kw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
