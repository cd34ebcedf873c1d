"""Training configuration: one JSON-serializable record holding every tunable
constant of the optimization (learning rates, schedule intervals, density
control thresholds, loss weights, model knobs)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .losses import LossWeights


@dataclass
class TrainConfig:
    total_iters: int = 50000
    seed: int = 0
    deterministic: bool = True
    sh_degree: int = 3
    use_rectifier: bool = True
    init_opacity: float = 0.1

    # positional encoder feeding the rectifier
    encoder_bands: int = 6
    encoder_include_identity: bool = False

    # learning rates; position decays log-linearly to lr_position_final
    lr_position_init: float = 8e-3
    lr_position_final: float = 1e-5
    lr_scaling: float = 0.017
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_sh: float = 2.5e-3
    lr_rectifier: float = 1e-4

    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps_splats: float = 1e-15
    adam_eps_rectifier: float = 1e-8

    # schedule
    densify_interval: int = 500
    density_control_end: int = 35000
    opacity_reset_interval: int = 5000
    opacity_reset_start: int = 10000
    checkpoint_interval: int = 5000

    # density control
    grad_threshold: float = 2e-4          # view-space positional gradient
    split_scale_factor: float = 0.01      # of scene extent; split vs clone
    prune_opacity_threshold: float = 0.005
    split_scale_divisor: float = 1.6
    max_splats: int = 0                   # 0 = unlimited; safety valve

    # losses
    weights: LossWeights = field(default_factory=LossWeights)
    eps_pos: float = 1.0
    eps_scaling: float = 0.6

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        for name in ("densify_interval", "opacity_reset_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be nonnegative")
        if self.density_control_end > self.total_iters and self.total_iters > 0:
            # allowed: controller simply never turns off within the run
            pass

    def to_dict(self):
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def load_config(path):
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as f:
        f.write(cfg.to_json())
        f.write("\n")
