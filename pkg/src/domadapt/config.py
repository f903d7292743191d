from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 10.0  # weight of triplet + policy-gradient + adversarial terms
    beta_run: float = 0.5  # prototype running-average coefficient
    beta_m: float = 0.5  # triplet margin base
    H: int = 8
    N: int = 4
    n_actions: int = 5
    tau: float = 1.0
    B: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 80
    seed: int = 0
    d_feature: int = 32
    d_hidden_layer: int = 64
    adv_lambda: float = 1.0
    use_triplet: bool = True
    use_ra: bool = True
    use_adv: bool = True
    fixed_k: int = 0  # 0 = sampled k
    triplet_weight: str = "uncertainty"
    select_best: bool = True  # False keeps the last epoch

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("H", "N", "n_actions", "B", "d_feature", "d_hidden_layer"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("tau", "lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "beta_m", "weight_decay", "momentum", "adv_lambda", "epochs", "fixed_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.beta_run <= 1.0:
            raise ConfigError(f"beta_run must lie in [0, 1], got {self.beta_run}")
        if self.d_feature % (self.H * self.N):
            raise ConfigError(
                f"H*N = {self.H * self.N} must divide d_feature = {self.d_feature}"
            )
        if self.fixed_k > self.B:
            raise ConfigError(f"fixed_k={self.fixed_k} exceeds batch size B={self.B}")
        if self.triplet_weight not in ("uncertainty", "certainty", "unit"):
            raise ConfigError(f"unknown triplet_weight {self.triplet_weight!r}")

    @property
    def ra_active(self) -> bool:
        # with alpha = 0 the proposed modules are inert, attention included
        return self.use_ra and self.alpha > 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: coerce(known[k].type, k, v) for k, v in d.items()})

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a flat JSON object")
        return cls.from_dict(d)

    def override(self, **kv) -> "TrainConfig":
        d = self.to_dict()
        d.update(kv)
        return TrainConfig.from_dict(d)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(type_name, key: str, value):
    """Turn JSON or command-line values into the field's declared type."""
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError(value)
        if t == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if t == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {t}") from None
