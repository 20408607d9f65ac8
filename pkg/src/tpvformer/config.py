"""Run configuration: a flat ``key = value`` text document with typed defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import DIFFICULTY_BOXES
from .errors import ConfigError
from .head import LossRouting


@dataclass
class RunConfig:
    """Every setting a command needs; each field has a default.

    Keys in a config file use the field names below.  Lines starting with
    ``#`` and blank lines are ignored.
    """

    # grid
    H: int = 50
    W: int = 50
    D: int = 4
    cell_size: float = 1.0
    # encoder
    channels: int = 32
    n_hcab: int = 2
    n_hab: int = 1
    heads: int = 2
    points_per_head: int = 4
    query_init_std: float = 0.5
    # task
    n_classes: int = 6
    routing: str = "voxel,point"
    representation: str = "tpv"
    # optimiser
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 10
    cosine: bool = True
    n_steps: int = 300
    max_grad_norm: float = 0.0  # 0 disables clipping
    # data
    difficulty: str = "medium"
    n_rays: int = 20000
    # run
    seed: int = 0
    log_every: int = 10

    def validate(self) -> "RunConfig":
        for name in ("H", "W", "D", "channels", "n_hcab", "heads", "points_per_head"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_hab < 0 or self.n_steps < 0 or self.warmup_steps < 0 or self.n_rays < 0:
            raise ConfigError("n_hab, n_steps, warmup_steps and n_rays must be >= 0")
        if self.cell_size <= 0 or self.lr <= 0:
            raise ConfigError("cell_size and lr must be > 0")
        if self.channels % self.heads:
            raise ConfigError("channels must be divisible by heads")
        if not 2 <= self.n_classes <= 254:
            raise ConfigError("n_classes must lie in [2, 254]")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.representation not in ("tpv", "bev"):
            raise ConfigError("representation must be 'tpv' or 'bev'")
        if self.difficulty not in DIFFICULTY_BOXES:
            raise ConfigError(f"difficulty must be one of {sorted(DIFFICULTY_BOXES)}")
        if self.max_grad_norm < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("max_grad_norm, weight_decay and momentum must be >= 0")
        LossRouting.parse(self.routing)
        return self

    def estimator_params(self) -> dict:
        keys = ("H", "W", "D", "cell_size", "channels", "n_hcab", "n_hab", "heads",
                "points_per_head", "n_classes", "routing", "representation", "optimizer",
                "lr", "momentum", "weight_decay", "warmup_steps", "cosine", "n_steps",
                "query_init_std", "seed", "log_every")
        params = {k: getattr(self, k) for k in keys}
        params["max_grad_norm"] = self.max_grad_norm or None
        return params

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for k, v in d.items():
            values[k] = _coerce(k, v, type(getattr(cls, k)))
        return cls(**values).validate()

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        items = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key in items:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            items[key] = value
        return cls.from_dict(items)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls().validate()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, str(path))


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, value, kind: type):
    if not isinstance(value, str):
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, kind):
            return value
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
