"""Evaluation rollouts and yearly performance metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from ehnode.env import HOURS_PER_DAY, NodeConfig

TRAJECTORY_COLUMNS = ("hour", "Eh", "duty", "Ec", "B", "reward", "failure")


@dataclass
class Trajectory:
    hour: np.ndarray
    harvest: np.ndarray
    duty: np.ndarray
    consumed: np.ndarray
    buffer: np.ndarray
    reward: np.ndarray
    failure: np.ndarray

    def __len__(self) -> int:
        return len(self.hour)

    def to_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for row in zip(self.hour, self.harvest, self.duty, self.consumed, self.buffer,
                           self.reward, self.failure):
                w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:6]] + [int(row[6])])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Trajectory":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != TRAJECTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected header {rows[0]}")
        cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(TRAJECTORY_COLUMNS)
        f = lambda c: np.array([float(x) for x in c])
        return cls(np.array([int(x) for x in cols[0]]), f(cols[1]), f(cols[2]), f(cols[3]),
                   f(cols[4]), f(cols[5]), np.array([bool(int(x)) for x in cols[6]]))


def rollout(env, act: Callable, start_hour: int = 0, initial_fraction: float = 0.6) -> Trajectory:
    """Run ``act(observation) -> duty`` until the env reports the episode is done."""
    obs = env.reset(start_hour=start_hour, initial_fraction=initial_fraction)
    cols = {k: [] for k in ("hour", "harvest", "duty", "consumed", "buffer", "reward", "failure")}
    hour = start_hour
    while True:
        res = env.step(act(obs))
        cols["hour"].append(hour)
        cols["harvest"].append(res.harvested_wh)
        cols["duty"].append(res.duty)
        cols["consumed"].append(res.consumed_wh)
        cols["buffer"].append(res.buffer_wh)
        cols["reward"].append(res.reward)
        cols["failure"].append(res.failure)
        hour += 1
        obs = res.next_observation
        if res.episode_done:
            break
    return Trajectory(**{k: np.asarray(v) for k, v in cols.items()})


def rms_edist_day(buffer, b0: float, b_max: float, window: int = HOURS_PER_DAY) -> float:
    """RMS of ``|B - b0|`` sampled at the end of every full window, in % of ``b_max``.

    ``buffer`` holds post-step levels, so the end of day ``d`` is index
    ``(d + 1) * window - 1``.
    """
    b = np.asarray(buffer, dtype=np.float64)
    if len(b) < window:
        raise ValueError(f"trajectory of {len(b)} steps is shorter than one window ({window})")
    ends = b[window - 1::window]
    return 100.0 * math.sqrt(np.mean((ends - b0) ** 2)) / b_max


def utilized_energy(consumed, normalizer_wh: float) -> float:
    """Consumed energy in % of ``normalizer_wh`` (the offline optimum's consumption)."""
    if not normalizer_wh > 0:
        raise ValueError("normalizer must be > 0")
    return 100.0 * math.fsum(np.asarray(consumed, dtype=np.float64)) / normalizer_wh


def lp_normalizer(harvest, cfg: NodeConfig, b_start: float) -> float:
    """Total consumption of the offline max-duty schedule on ``harvest``."""
    from ehnode.lp import optimal_schedule
    sched = optimal_schedule(harvest, cfg, b_start, smooth=False)
    return sched.objective * cfg.consume_coeff_wh


def utilized_energy_on(consumed, harvest, cfg: NodeConfig, b_start: float) -> float:
    """:func:`utilized_energy` with the normalizer solved on ``harvest``."""
    c = np.asarray(consumed, dtype=np.float64)
    if len(c) != len(harvest):
        raise ValueError(f"{len(c)} consumption steps for {len(harvest)} harvest hours")
    return utilized_energy(c, lp_normalizer(harvest, cfg, b_start))


def variance_mean(duties) -> float:
    """Mean absolute change of consecutive duties, in percent."""
    d = np.asarray(duties, dtype=np.float64)
    if len(d) == 0:
        raise ValueError("empty duty sequence")
    if len(d) == 1:
        return 0.0
    return 100.0 * float(np.mean(np.abs(np.diff(d))))


def failure_count(failures) -> int:
    f = np.asarray(failures, dtype=bool)
    if f.size == 0:
        raise ValueError("empty failure sequence")
    return int(np.count_nonzero(f))


@dataclass
class Metrics:
    rms_edist_day_pct: float
    utilized_energy_pct: float
    variance_mean: float
    power_failures: int
    total_duty: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(traj: Trajectory, cfg: NodeConfig, b0: float,
                    normalizer_wh: Optional[float]) -> Metrics:
    util = utilized_energy(traj.consumed, normalizer_wh) if normalizer_wh else float("nan")
    return Metrics(
        rms_edist_day_pct=rms_edist_day(traj.buffer, b0, cfg.buffer_capacity_wh),
        utilized_energy_pct=util,
        variance_mean=variance_mean(traj.duty),
        power_failures=failure_count(traj.failure),
        total_duty=math.fsum(traj.duty),
    )
