"""Training hyperparameters shared by the trainer, the CLI and the tests."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError

REGIMES = ("off_policy", "onestep", "ensemble_lcb")
MODES = ("self_play", "reference")


@dataclass
class TrainConfig:
    lam: float = 1.0
    alpha: float = 0.2
    gamma: float = 0.99
    tau: float = 0.005
    omega: float = 2.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    ebm_lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 256
    steps: int = 100_000
    critic_steps: int = 100_000
    ebm_steps: int = 20_000
    ebm_batch_size: int = 256
    ebm_negatives: int = 256
    seed: int = 1
    regime: str = "off_policy"
    mode: str = "self_play"
    reward_scale: float = 1.0
    n_critics: int | None = None
    policy_hidden: tuple[int, ...] = (256, 256)
    critic_hidden: tuple[int, ...] = (256, 256)
    ebm_hidden: tuple[int, ...] = (512, 512, 512, 512)
    critic_layer_norm: bool = True
    policy_layer_norm: bool = False
    ebm_layer_norm: bool = True
    ebm_spectral_norm: bool = True
    eval_every: int = 10_000
    eval_episodes: int = 10
    normalize_states: bool = True

    def __post_init__(self):
        for name in ("policy_hidden", "critic_hidden", "ebm_hidden"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if self.alpha < 0 or self.omega < 0:
            raise ConfigError("alpha and omega must be >= 0")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        for name in ("actor_lr", "critic_lr", "ebm_lr", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "ebm_batch_size", "ebm_negatives", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("steps", "critic_steps", "ebm_steps", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def members(self) -> int:
        if self.n_critics is not None:
            return self.n_critics
        return 4 if self.regime == "ensemble_lcb" else 2

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


FULL_FIDELITY = dict(steps=1_000_000, ebm_steps=200_000, critic_steps=1_000_000, batch_size=512)
