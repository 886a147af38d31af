"""Experiment configuration: environment, network and run settings."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path


class Method(str, Enum):
    SHORTEST_PATH = "ShortestPath"
    IQL = "IQL"
    IQL_GLOBAL_FCC = "IQL_Global_FCC"
    IQL_LSTM_ONLY = "IQL_LSTM_Only"
    IQL_CVAE_NOMGDA = "IQL_CVAE_NoMGDA"
    IQL_CVAE_MGDA = "IQL_CVAE_MGDA"

    @property
    def uses_cvae(self) -> bool:
        return self in (Method.IQL_CVAE_NOMGDA, Method.IQL_CVAE_MGDA)

    @property
    def learns(self) -> bool:
        return self is not Method.SHORTEST_PATH


@dataclass
class EnvConfig:
    graph: str = "graph39"
    n_evs: int = 2
    spots_per_evcs: int = 2
    battery_kwh: float = 60.0
    consumption_kwh_per_km: float = 0.15
    time_cost_per_min: float = 0.4
    charge_power_kw: float = 60.0
    fail_penalty: float = 200.0
    horizon_min: float = 480.0
    price_period_min: float = 30.0
    velocity_period_min: float = 5.0
    soc_init_low: float = 0.4
    soc_init_high: float = 0.6
    price_base_low: float = 0.3
    price_base_high: float = 0.7
    price_rel_std: float = 0.15
    soc_max: float = 1.0

    def validate(self):
        if self.n_evs < 1:
            raise ValueError("n_evs must be >= 1")
        if self.spots_per_evcs < 1:
            raise ValueError("spots_per_evcs must be >= 1")
        for name in ("battery_kwh", "consumption_kwh_per_km", "charge_power_kw",
                     "horizon_min", "price_period_min", "velocity_period_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.soc_init_low <= self.soc_init_high <= 1:
            raise ValueError("initial SOC bounds must satisfy 0 <= low <= high <= 1")
        return self


@dataclass
class HyperParams:
    """Learning settings for every learning method."""

    lr_dqn: float = 5e-4
    lr_cvae: float = 1e-5
    # decoder + LSTM receive both losses; None means they step at lr_dqn
    lr_shared: float | None = None
    batch_size: int = 16
    gamma: float = 0.99
    buffer_size: int = 1_000_000
    dqn_hidden: int = 128
    dqn_layers: int = 3
    cvae_hidden: int = 64
    lstm_hidden: int = 32
    lstm_layers: int = 2
    latent_dim: int = 8
    window: int = 8
    target_sync: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    logvar_clip: float = 10.0
    reward_scale: float = 0.1
    updates_per_step: int = 1
    fcc_softmax_sign: float = 1.0
    mask_unreachable: bool = False
    ri_sample_prior: bool = False
    ri_runtime: str = "window"

    @property
    def shared_lr(self) -> float:
        return self.lr_dqn if self.lr_shared is None else self.lr_shared


@dataclass
class RunConfig:
    method: Method = Method.IQL_CVAE_MGDA
    episodes: int = 1000
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_seeds: list[int] = field(default_factory=lambda: list(range(1000, 1020)))
    checkpoint_every: int = 100
    env: EnvConfig = field(default_factory=EnvConfig)
    hyper: HyperParams = field(default_factory=HyperParams)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        d["hyper"]["adam_betas"] = list(self.hyper.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        env = EnvConfig(**d.pop("env", {}))
        hyper = dict(d.pop("hyper", {}))
        if "adam_betas" in hyper:
            hyper["adam_betas"] = tuple(hyper["adam_betas"])
        cfg = cls(env=env, hyper=HyperParams(**hyper), **d)
        cfg.method = Method(cfg.method)
        cfg.env.validate()
        return cfg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON run configuration; bundled scene names are accepted too."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("evnav.data").joinpath(f"{path}.json")
        if not bundled.is_file():
            raise FileNotFoundError(path)
        return RunConfig.from_dict(json.loads(bundled.read_text()))
    return RunConfig.from_dict(json.loads(p.read_text()))
