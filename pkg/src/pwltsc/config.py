"""Declarative run configuration (JSON) with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from .env import EnvConfig, RewardParams
from .errors import ConfigError
from .forecast import ForecastConfig
from .marl import TrainerConfig
from .trafficsim import SimParams, TrafficGraph, load_network


@dataclass
class MdpConfig:
    kappa1: float = 25.0
    kappa2: float = 5.0
    kappa3: float = 5.0
    dt: float = 5.0
    horizon_s: float = 2500.0
    reward: str = "piecewise"
    demand_scale: float = 1.0
    demand_rates: Optional[Dict[str, float]] = None  # per source edge id, veh/s
    yellow_s: float = 2.0
    g_min_s: float = 5.0
    g_max_s: float = 50.0
    saturation_flow: float = 0.5

    def env_config(self) -> EnvConfig:
        sim = SimParams(
            saturation_flow=self.saturation_flow, yellow_s=self.yellow_s, g_min_s=self.g_min_s, g_max_s=self.g_max_s
        )
        return EnvConfig(
            dt=self.dt,
            horizon_s=self.horizon_s,
            reward=self.reward,
            reward_params=RewardParams(self.kappa1, self.kappa2, self.kappa3),
            sim=sim,
            demand_scale=self.demand_scale,
        )


@dataclass
class PretrainConfig:
    episodes: int = 3
    d_ehh: int = 8
    lam: float = 1e-4
    cap: Optional[int] = 64
    steps: int = 200


@dataclass
class FixedConfig:
    green_s: float = 25.0


@dataclass
class EvalConfig:
    episodes: int = 5


@dataclass
class ForecastSection:
    csv: Optional[str] = None  # None: bundled synthetic generator
    horizons: List[int] = field(default_factory=lambda: [3, 6, 9])
    window: int = 12
    d_ehh: int = 16
    lam: float = 1e-4
    steps: int = 300
    lr: float = 0.01
    cap: Optional[int] = 64
    n_nodes: int = 15
    length: int = 2016

    def model_config(self, seed: int) -> ForecastConfig:
        return ForecastConfig(self.window, self.d_ehh, self.lam, self.steps, self.lr, self.cap, seed)


@dataclass
class RunConfig:
    network: Union[str, dict] = "grid5x5"
    seed: int = 0
    out: str = "runs"
    workers: int = 1
    mdp: MdpConfig = field(default_factory=MdpConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fixed: FixedConfig = field(default_factory=FixedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    forecast: ForecastSection = field(default_factory=ForecastSection)

    def graph(self) -> TrafficGraph:
        g = load_network(self.network)
        rates = self.mdp.demand_rates
        if rates is not None:
            doc = g.to_document()
            known = {s["edge"] for s in doc["sources"]}
            unknown = sorted(set(rates) - known)
            if unknown:
                raise ConfigError(f"mdp.demand_rates: unknown source edges {unknown}")
            for s in doc["sources"]:
                s["rate_veh_per_s"] = float(rates.get(s["edge"], s["rate_veh_per_s"]))
            g = load_network(doc)
        return g

    def trainer_config(self) -> TrainerConfig:
        return dataclasses.replace(self.trainer, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainer"].pop("seed")  # the top-level seed is authoritative
        return d

    def digest(self) -> str:
        """Hash of everything that can change results (not ``out`` or ``workers``)."""
        d = self.to_dict()
        del d["out"], d["workers"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_NESTED = {
    "mdp": MdpConfig,
    "trainer": TrainerConfig,
    "pretrain": PretrainConfig,
    "fixed": FixedConfig,
    "eval": EvalConfig,
    "forecast": ForecastSection,
}


def _build(cls, doc, where: str, exclude=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for k, v in doc.items():
        if where == "" and k in _NESTED:
            v = _build(_NESTED[k], v, f"{k}.", exclude=("seed",) if k == "trainer" else ())
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    _check_types(cfg)
    return cfg


def _check_types(cfg: RunConfig) -> None:
    checks = [
        ("seed", cfg.seed, int),
        ("workers", cfg.workers, int),
        ("trainer.episodes", cfg.trainer.episodes, int),
        ("trainer.batch", cfg.trainer.batch, int),
        ("pretrain.episodes", cfg.pretrain.episodes, int),
        ("eval.episodes", cfg.eval.episodes, int),
    ]
    for name, value, typ in checks:
        if isinstance(value, bool) or not isinstance(value, typ):
            raise ConfigError(f"{name}: expected {typ.__name__}, got {value!r}")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    if cfg.eval.episodes < 1:
        raise ConfigError("eval.episodes: must be >= 1")
    # construct once so invalid values surface here, with field names
    try:
        cfg.mdp.env_config()
    except ConfigError as exc:
        raise ConfigError(f"mdp: {exc}") from None


def load_config(path) -> RunConfig:
    """Read a config file; a run manifest is accepted too (its ``config`` entry is used)."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and "manifest_version" in doc:
        doc = doc["config"]
    return config_from_dict(doc)
