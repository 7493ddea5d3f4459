"""Run configuration: every tunable with its default, plus a small text format.

Files hold one ``key = value`` per line; ``#`` starts a comment. Unknown keys
and malformed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .losses import LossWeights
from .motionmodel import ESTIMATORS

INIT_MODES = ("perturb", "truth")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # trajectory
    n_samples: int = 9
    latent_dim: int = 64
    substeps: int = 4
    estimator: str = "ode"
    rigid: bool = True
    cmr: bool = True
    orth_loss: bool = True
    share_derivative: bool = True
    # objective
    lambda_c: float = 0.3
    lambda_o: float = 1e-4
    lambda_m: float = 1e-3
    # schedule
    warmup_gauss_iters: int = 200
    motion_start: int = 400
    weightmask_start: int = 800
    total_iters: int = 3000
    checkpoint_every: int = 500
    # optimizer
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_motion: float = 1e-3
    lr_weightnet: float = 1e-3
    grad_clip: float = 0.0
    # model and data
    wnet_channels: int = 32
    sh_degree: int = 0
    image_size: int = 64
    init: str = "perturb"
    init_mean_jitter: float = 0.01
    seed: int = 0
    threads: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_samples < 2:
            raise ConfigError("n_samples must be at least 2")
        if self.latent_dim < 2 or self.latent_dim % 2:
            raise ConfigError("latent_dim must be an even number >= 2")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {', '.join(ESTIMATORS)}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {', '.join(INIT_MODES)}")
        if self.sh_degree not in (0, 1):
            raise ConfigError("sh_degree must be 0 or 1")
        if not (0 <= self.warmup_gauss_iters <= self.motion_start <= self.weightmask_start
                <= self.total_iters):
            raise ConfigError("need warmup_gauss_iters <= motion_start <= weightmask_start <= total_iters")
        if self.checkpoint_every < 0 or self.threads < 0 or self.grad_clip < 0:
            raise ConfigError("checkpoint_every, threads and grad_clip must be non-negative")
        if self.image_size < 11:
            raise ConfigError("image_size must be at least 11 (SSIM window)")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive")
        try:
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_o if self.orth_loss else 0.0, self.lambda_m)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def field_types() -> dict:
    return {f.name: type(f.default) for f in fields(Config)}


def defaults() -> dict:
    return {f.name: f.default for f in fields(Config)}


def parse_pairs(pairs: dict[str, str], base: Config | None = None) -> Config:
    types = field_types()
    values = dataclasses.asdict(base) if base is not None else defaults()
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(key, types[key], raw)
    return Config(**values)


def parse_text(text: str, base: Config | None = None) -> Config:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_pairs(pairs, base)


def load(path, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            with open(path) as fh:
                cfg = parse_text(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_pairs(overrides or {}, cfg)
