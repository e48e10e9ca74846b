"""Flat ``key = value`` run configuration with documented defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from mdcs.dataops import AugmentPolicy
from mdcs.losses import DistillConfig, default_lambdas


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # data: empty paths select the synthetic generator
    train_data: str = ""
    test_data: str = ""
    classes: int = 10
    dim: int = 16
    n_max: int = 500
    beta: float = 100.0
    separation: float = 2.5
    test_per_class: int = 100
    many_threshold: int = 100
    few_threshold: int = 20
    # model
    M: int = 3
    lambdas: tuple = field(default=())
    widths: tuple = (64, 64)
    scale: float = 16.0
    # optimization (desk-scale choices, not large-backbone settings)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    schedule: str = "linear"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    # distillation
    alpha: float = 0.6
    temperature: float = 2.0
    detach_teacher: bool = True
    supervise_both_views: bool = True
    # augmentation
    weak_jitter: float = 0.1
    strong_jitter: float = 0.5
    strong_dropout: float = 0.2
    strong_scale: tuple = (0.8, 1.2)
    strong_ops: int = 1
    seed: int = 0

    def __post_init__(self):
        lambdas = tuple(self.lambdas) if self.lambdas else tuple(default_lambdas(self.M))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in lambdas))
        _validate(self)

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.temperature, self.alpha, self.detach_teacher, self.supervise_both_views)

    @property
    def weak_policy(self) -> AugmentPolicy:
        return AugmentPolicy.weak(self.weak_jitter)

    @property
    def strong_policy(self) -> AugmentPolicy:
        return AugmentPolicy.strong(
            self.strong_jitter, self.strong_dropout, self.strong_scale, self.strong_ops
        )

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; changing ``M`` alone re-derives the default lambdas."""
        if "M" in changes and "lambdas" not in changes:
            changes["lambdas"] = ()
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            key = "lambda" if f.name == "lambdas" else f.name
            lines.append(f"{key} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {
            ("lambda" if k == "lambdas" else k): (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(self).items()
        }


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_KEYS = {("lambda" if name == "lambdas" else name): name for name in _FIELDS}


def _validate(cfg: TrainConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.M >= 1, "M must be >= 1")
    need(len(cfg.lambdas) == cfg.M, f"lambda list has {len(cfg.lambdas)} entries but M = {cfg.M}")
    need(cfg.alpha >= 0, "alpha must be >= 0")
    need(cfg.temperature > 0, "temperature must be > 0")
    need(cfg.classes >= 2 and cfg.dim >= 2, "classes and dim must be >= 2")
    need(cfg.n_max >= 1 and cfg.beta >= 1, "n_max must be >= 1 and beta >= 1")
    need(cfg.separation > 0, "separation must be > 0")
    need(cfg.test_per_class >= 1, "test_per_class must be >= 1")
    need(cfg.few_threshold <= cfg.many_threshold, "few_threshold must not exceed many_threshold")
    need(len(cfg.widths) >= 1 and min(cfg.widths) >= 1, "widths must list positive layer sizes")
    need(cfg.epochs >= 0 and cfg.batch_size >= 1, "epochs must be >= 0 and batch_size >= 1")
    need(cfg.lr >= 0 and cfg.weight_decay >= 0 and 0 <= cfg.momentum < 1, "bad optimizer settings")
    need(cfg.schedule in ("linear", "cosine"), "schedule must be linear or cosine")
    need(cfg.weak_jitter >= 0 and cfg.strong_jitter >= cfg.weak_jitter,
         "need 0 <= weak_jitter <= strong_jitter")
    need(0 <= cfg.strong_dropout <= 1, "strong_dropout must lie in [0, 1]")
    need(len(cfg.strong_scale) == 2 and cfg.strong_scale[0] <= cfg.strong_scale[1],
         "strong_scale must be 'lo, hi'")
    need(cfg.strong_ops >= 1, "strong_ops must be >= 1")
    need(cfg.seed >= 0, "seed must be a non-negative integer")


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(name: str, text: str):
    default = _FIELDS[name].default
    if name == "lambdas":
        if text.lower() == "auto":
            return ()
        return tuple(float(v) for v in text.split(","))
    if name == "widths":
        return tuple(int(v) for v in text.split(","))
    if name == "strong_scale":
        return tuple(float(v) for v in text.split(","))
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, **overrides) -> TrainConfig:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        name = _KEYS[key]
        try:
            values[name] = _convert(name, value)
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: bad value for {key!r}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path, **overrides) -> TrainConfig:
    """Read a config file; missing keys take the dataclass defaults."""
    if path is None:
        return parse_config_text("", **overrides)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, **overrides)
