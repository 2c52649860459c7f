"""Experiment configuration and single train/evaluate runs.

A run trains one agent on the training trace and evaluates it greedily
(PPO: the clipped policy mean; SARSA: the arg-max action) over the whole
evaluation trace, starting at ``eval_initial_fraction`` of the capacity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from ehnode import ppo, sarsa
from ehnode.env import NodeConfig, NodeEnv, ObservationVariant
from ehnode.harvest import HarvestTrace, SynthProfile, load_csv, make_forecast, synth_generate
from ehnode.metrics import Metrics, Trajectory, compute_metrics, lp_normalizer, rollout
from ehnode.rewards import RewardKind, RewardSpec

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    """Application-goal experiment defaults (continuous PPO)."""
    return {
        "node": NodeConfig(failure_rule="brownout").to_dict(),
        "reward": RewardSpec.appgoal(zeta=0.05, failure_penalty=1000.0, duty_units=1.0,
                                     variance_units=100.0).to_dict(),
        "data": {
            "train": {"source": "synthetic", "days": 365, "seed": 2010},
            "eval": {"source": "synthetic", "days": 365, "seed": 2011},
            "profile": SynthProfile().to_dict(),
            "forecast_noise": 0.2,
            "forecast_seed": 0,
        },
        "env": {
            "episode_length": 24,
            "initial_fraction": 0.6,
            "init_fraction_range": [0.0, 1.0],
            "observation": "appgoal",
        },
        "agent": {
            "kind": "ppo",
            "ppo": ppo.PpoHyper(total_steps=600_000, reward_scale=0.05, init_std=0.05,
                                init_mean=0.3).to_dict(),
            "sarsa": sarsa.SarsaHyper().to_dict(),
        },
        "eval": {"initial_fraction": 0.6},
    }


def neutrality_config() -> dict:
    """Energy-neutrality experiment: daily episodes paid at the end of the day."""
    cfg = default_config()
    cfg["node"] = NodeConfig(duty_min=0.2).to_dict()
    cfg["reward"] = RewardSpec.neutrality(b0_wh=24.0, episodic_T=24).to_dict()
    cfg["data"]["forecast_noise"] = 0.0
    cfg["env"]["observation"] = "neutrality"
    cfg["env"]["init_fraction_range"] = [0.45, 0.75]
    cfg["agent"]["ppo"] = ppo.PpoHyper(reward_scale=1 / 500, bootstrap_truncated=False).to_dict()
    cfg["agent"]["sarsa"] = sarsa.SarsaHyper(bootstrap_truncated=False).to_dict()
    return cfg


PRESETS = {"appgoal": default_config, "neutrality": neutrality_config}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    d = cfg
    for p in parts[:-1]:
        if p not in d or not isinstance(d[p], dict):
            raise ConfigError(f"unknown config section {key!r}")
        d = d[p]
    if parts[-1] not in d:
        raise ConfigError(f"unknown config key {key!r}")
    d[parts[-1]] = value


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


@dataclass
class Parsed:
    node: NodeConfig
    reward: RewardSpec
    ppo: ppo.PpoHyper
    sarsa: sarsa.SarsaHyper
    agent: str
    variant: ObservationVariant
    raw: dict


def parse(cfg: dict) -> Parsed:
    try:
        agent = cfg["agent"]["kind"]
        if agent not in ("ppo", "sarsa"):
            raise ConfigError(f"agent.kind must be 'ppo' or 'sarsa', got {agent!r}")
        return Parsed(
            node=NodeConfig.from_dict(cfg["node"]),
            reward=RewardSpec.from_dict(cfg["reward"]),
            ppo=ppo.PpoHyper(**cfg["agent"]["ppo"]),
            sarsa=sarsa.SarsaHyper(**cfg["agent"]["sarsa"]),
            agent=agent,
            variant=ObservationVariant(cfg["env"]["observation"]),
            raw=cfg,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from e


def _trace_from(spec: dict, profile: dict, panel_rating_w: float) -> HarvestTrace:
    src = spec.get("source")
    if src == "synthetic":
        return _synth(int(spec["days"]), int(spec["seed"]), json.dumps(profile, sort_keys=True))
    if src == "csv":
        return load_csv(spec["path"], panel_rating_w)
    raise ConfigError(f"unknown data source {src!r}")


@lru_cache(maxsize=16)
def _synth(days: int, seed: int, profile_json: str) -> HarvestTrace:
    return synth_generate(days, seed, SynthProfile(**json.loads(profile_json)))


_NORMALIZERS: dict = {}


def _normalizer(harvest: np.ndarray, cfg: NodeConfig, b_start: float) -> float:
    key = (harvest.tobytes(), cfg, b_start)
    if key not in _NORMALIZERS:
        _NORMALIZERS[key] = lp_normalizer(harvest, cfg, b_start)
    return _NORMALIZERS[key]


def load_traces(cfg: dict):
    node = NodeConfig.from_dict(cfg["node"])
    d = cfg["data"]
    profile = d.get("profile", SynthProfile().to_dict())
    return (_trace_from(d["train"], profile, node.panel_rating_w),
            _trace_from(d["eval"], profile, node.panel_rating_w))


def make_env(p: Parsed, trace: HarvestTrace, forecast_seed: int, training: bool,
             rng: Optional[np.random.Generator] = None, reward: Optional[RewardSpec] = None) -> NodeEnv:
    d, e = p.raw["data"], p.raw["env"]
    fc = make_forecast(trace, float(d["forecast_noise"]), forecast_seed)
    rng = rng if rng is not None else np.random.default_rng(0)
    return NodeEnv(
        cfg=p.node,
        hourly_wh=trace.hourly_wh,
        forecast_wh=fc.daily_wh,
        reward_spec=reward or p.reward,
        variant=p.variant,
        episode_length=int(e["episode_length"]) if training else len(trace),
        initial_fraction=float(e["initial_fraction"]),
        init_fraction_range=tuple(e["init_fraction_range"]) if training and e.get("init_fraction_range") else None,
        random_start=training,
        discrete=p.agent == "sarsa",
        rng=rng,
    )


@dataclass
class RunRecord:
    config: dict
    seed: int
    metrics: dict
    wall_time_s: float
    config_hash: str
    snapshot_path: Optional[str] = None
    trajectory_path: Optional[str] = None
    normalizer_wh: Optional[float] = None
    curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_agent(p: Parsed, train_trace: HarvestTrace, seed: int):
    fseed = int(p.raw["data"]["forecast_seed"])

    def factory(reward_spec, rng):
        return make_env(p, train_trace, fseed, training=True, rng=rng, reward=reward_spec)

    if p.agent == "ppo":
        return ppo.train(factory, p.reward, p.ppo, seed)
    return sarsa.train_sarsa(factory, p.reward, p.sarsa, seed)


def agent_act(p: Parsed, trained):
    if p.agent == "ppo":
        params = trained.params if hasattr(trained, "params") else trained
        return lambda obs: params.act(obs.values)
    return trained.act


def evaluate(p: Parsed, act, eval_trace: HarvestTrace, normalizer_wh: Optional[float] = None):
    """Greedy rollout over the whole evaluation trace; returns ``(trajectory, metrics)``."""
    fseed = int(p.raw["data"]["forecast_seed"]) + 1
    env = make_env(p, eval_trace, fseed, training=False)
    init = float(p.raw["eval"]["initial_fraction"])
    traj = rollout(env, act, 0, init)
    if normalizer_wh is None:
        b_start = init * p.node.buffer_capacity_wh
        normalizer_wh = _normalizer(eval_trace.hourly_wh, p.node, b_start)
    b0 = p.reward.b0_wh if p.reward.kind is RewardKind.NEUTRALITY else init * p.node.buffer_capacity_wh
    return traj, compute_metrics(traj, p.node, b0, normalizer_wh), normalizer_wh


def run_experiment(cfg: dict, seed: int, out_dir: Optional[Path] = None) -> RunRecord:
    """Train, evaluate and (optionally) write trajectory, snapshot and record."""
    p = parse(cfg)
    t0 = time.perf_counter()
    train_trace, eval_trace = load_traces(cfg)
    trained = train_agent(p, train_trace, seed)
    traj, metrics, norm = evaluate(p, agent_act(p, trained), eval_trace)
    wall = time.perf_counter() - t0
    rec = RunRecord(config=cfg, seed=seed, metrics=metrics.to_dict(), wall_time_s=wall,
                    config_hash=config_hash(cfg), normalizer_wh=norm,
                    curve=[float(x) for x in (trained.curve or [])])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        traj_path = out_dir / "trajectory.csv"
        traj.to_csv(traj_path)
        if p.agent == "ppo":
            snap = out_dir / "policy.bin"
            ppo.save_policy(trained.params, snap)
        else:
            snap = out_dir / "qtable.json"
            sarsa.save_qtable(trained, snap)
        rec.snapshot_path = str(snap)
        rec.trajectory_path = str(traj_path)
        rec.save(out_dir / "record.json")
    return rec


def recompute_metrics(rec: RunRecord) -> Metrics:
    """Metrics recomputed from the stored trajectory of a record."""
    p = parse(rec.config)
    traj = Trajectory.from_csv(rec.trajectory_path)
    init = float(p.raw["eval"]["initial_fraction"])
    b0 = p.reward.b0_wh if p.reward.kind is RewardKind.NEUTRALITY else init * p.node.buffer_capacity_wh
    return compute_metrics(traj, p.node, b0, rec.normalizer_wh)
