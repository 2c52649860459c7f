"""Step-based simulator of a solar energy-harvesting sensor node.

The node has an ideal energy buffer of capacity ``B_max`` and a load whose
hourly consumption is proportional to the duty cycle::

    Ec_t = kappa * D_t   if B_t > kappa * D_t  else 0
    B_{t+1} = min(B_t + Eh_t - Ec_t, B_max)

One step is one hour. A node whose buffer is empty keeps stepping; failures
are counted, never absorbing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ehnode.rewards import (
    RewardKind,
    RewardSpec,
    duty_variance,
    edist,
    reward_a,
    reward_e,
)

# Duty set used by the tabular agents and the neutrality experiments.
DISCRETE_DUTIES = (0.2, 0.4, 0.6, 0.8, 1.0)

HOURS_PER_DAY = 24


class InvalidActionError(ValueError):
    pass


class FailureRule(str, enum.Enum):
    # failure only when the buffer after the update is exactly 0
    EMPTY = "empty"
    # additionally a failure when a non-zero duty cannot be served (B_t <= kappa * D_t)
    BROWNOUT = "brownout"


@dataclass(frozen=True)
class NodeConfig:
    buffer_capacity_wh: float = 40.0
    consume_coeff_wh: float = 5.0
    duty_min: float = 0.0
    duty_max: float = 1.0
    panel_rating_w: float = 6.0
    failure_rule: FailureRule = FailureRule.EMPTY

    def __post_init__(self):
        object.__setattr__(self, "failure_rule", FailureRule(self.failure_rule))
        if not self.buffer_capacity_wh > 0:
            raise ValueError("buffer_capacity_wh must be > 0")
        if not self.consume_coeff_wh > 0:
            raise ValueError("consume_coeff_wh must be > 0")
        if not 0.0 <= self.duty_min < self.duty_max <= 1.0:
            raise ValueError(
                f"need 0 <= duty_min < duty_max <= 1, got {self.duty_min}, {self.duty_max}")
        if not self.panel_rating_w > 0:
            raise ValueError("panel_rating_w must be > 0")

    @classmethod
    def low_consumption(cls, **kw) -> "NodeConfig":
        """Preset with 0.5 Wh consumed per hour at full duty."""
        return cls(consume_coeff_wh=0.5, **kw)

    def with_(self, **changes) -> "NodeConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "buffer_capacity_wh": self.buffer_capacity_wh,
            "consume_coeff_wh": self.consume_coeff_wh,
            "duty_min": self.duty_min,
            "duty_max": self.duty_max,
            "panel_rating_w": self.panel_rating_w,
            "failure_rule": self.failure_rule.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeConfig":
        return cls(**d)


@dataclass
class EnvState:
    """Simulator state.

    ``hour`` indexes the harvest trace, ``elapsed`` counts steps since the
    last reset. ``reward_acc`` holds the running sum of per-step terms when
    rewards are paid out episodically.
    """

    buffer_wh: float
    hour: int = 0
    elapsed: int = 0
    prev_duty: float = 0.0
    failed_this_step: bool = False
    reward_acc: float = 0.0


class ObservationVariant(str, enum.Enum):
    NEUTRALITY = "neutrality"  # (B, Edist, Eh, Wf_day)
    APPGOAL = "appgoal"  # (B, Eh, Wf, D_prev)


@dataclass(frozen=True)
class Observation:
    variant: ObservationVariant
    values: tuple

    def __post_init__(self):
        if len(self.values) != 4:
            raise ValueError("an observation has exactly four components")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class StepResult:
    next_observation: Optional[Observation]
    reward: float
    consumed_wh: float
    harvested_wh: float
    failure: bool
    episode_done: bool
    duty: float
    buffer_wh: float


def consumed_energy(duty: float, buffer_wh: float, cfg: NodeConfig) -> float:
    demand = cfg.consume_coeff_wh * duty
    if buffer_wh > demand:
        return demand
    return 0.0


def buffer_update(buffer_wh: float, harvested_wh: float, consumed_wh: float,
                  cfg: NodeConfig) -> float:
    b = buffer_wh + harvested_wh - consumed_wh
    if b > cfg.buffer_capacity_wh:
        return cfg.buffer_capacity_wh
    if b < 0.0:
        return 0.0
    return b


def clip_duty(duty: float, cfg: NodeConfig) -> float:
    if duty < cfg.duty_min:
        return cfg.duty_min
    if duty > cfg.duty_max:
        return cfg.duty_max
    return duty


def is_failure(buffer_before: float, duty: float, buffer_after: float, cfg: NodeConfig) -> bool:
    if buffer_after == 0.0:
        return True
    if cfg.failure_rule is FailureRule.BROWNOUT:
        return duty > 0.0 and buffer_before <= cfg.consume_coeff_wh * duty
    return False


def step(state: EnvState, action_duty: float, harvest_now: float, reward_spec: RewardSpec,
         cfg: NodeConfig, discrete: bool = False) -> tuple[EnvState, StepResult]:
    """Advance one hour from ``state``.

    Continuous actions are clipped to ``[duty_min, duty_max]``; in discrete
    mode the action must be one of ``DISCRETE_DUTIES``. Returns the new
    state and a StepResult without an observation (the caller owns the
    trace needed to build one).
    """
    if not math.isfinite(action_duty):
        raise InvalidActionError(f"non-finite action {action_duty!r}")
    if discrete:
        if action_duty not in DISCRETE_DUTIES:
            raise InvalidActionError(f"{action_duty!r} is not in {DISCRETE_DUTIES}")
        duty = float(action_duty)
    else:
        duty = clip_duty(float(action_duty), cfg)

    b = state.buffer_wh
    ec = consumed_energy(duty, b, cfg)
    b_next = buffer_update(b, harvest_now, ec, cfg)
    failed = is_failure(b, duty, b_next, cfg)
    elapsed = state.elapsed + 1

    T = reward_spec.episodic_T
    pay_now = elapsed % T == 0
    acc = state.reward_acc
    if reward_spec.kind is RewardKind.NEUTRALITY:
        reward = reward_e(edist(b_next, reward_spec.b0_wh)) if pay_now else 0.0
    else:
        term = reward_a(duty, duty_variance(duty, state.prev_duty), b_next, reward_spec,
                        failed=failed)
        if T == 1:
            reward = term
        else:
            acc += term
            reward = acc if pay_now else 0.0
            if pay_now:
                acc = 0.0

    new_state = EnvState(buffer_wh=b_next, hour=state.hour + 1, elapsed=elapsed,
                         prev_duty=duty, failed_this_step=failed, reward_acc=acc)
    result = StepResult(next_observation=None, reward=reward, consumed_wh=ec,
                        harvested_wh=harvest_now, failure=failed, episode_done=False,
                        duty=duty, buffer_wh=b_next)
    return new_state, result


def reset(cfg: NodeConfig, initial_buffer_fraction: float, trace, start_hour: int = 0) -> EnvState:
    if not 0.0 <= initial_buffer_fraction <= 1.0:
        raise ValueError(f"initial_buffer_fraction must be in [0, 1], got {initial_buffer_fraction}")
    n = len(trace)
    if not 0 <= start_hour < n:
        raise IndexError(f"start_hour {start_hour} outside trace of length {n}")
    return EnvState(buffer_wh=initial_buffer_fraction * cfg.buffer_capacity_wh, hour=start_hour)


@dataclass
class NodeEnv:
    """Gym-style wrapper around :func:`step` bound to a harvest trace.

    ``hourly_wh`` and ``forecast_wh`` are plain arrays (see
    :mod:`ehnode.harvest` for how to build them). When ``random_start`` is
    set, each reset draws a start day and, if ``init_fraction_range`` is
    given, an initial buffer fraction from ``rng``.
    """

    cfg: NodeConfig
    hourly_wh: np.ndarray
    forecast_wh: np.ndarray
    reward_spec: RewardSpec
    variant: ObservationVariant = ObservationVariant.APPGOAL
    episode_length: int = 24
    initial_fraction: float = 0.6
    init_fraction_range: Optional[tuple] = None
    random_start: bool = False
    discrete: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        self.hourly_wh = np.asarray(self.hourly_wh, dtype=np.float64)
        self.forecast_wh = np.asarray(self.forecast_wh, dtype=np.float64)
        self.variant = ObservationVariant(self.variant)
        self._eh = self.hourly_wh.tolist()
        self._wf = self.forecast_wh.tolist()
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        self.state: Optional[EnvState] = None

    @property
    def n_hours(self) -> int:
        return len(self._eh)

    def observation_scale(self) -> np.ndarray:
        """Fixed per-component scales used to normalise observations."""
        k = self.cfg.consume_coeff_wh
        bmax = self.cfg.buffer_capacity_wh
        if self.variant is ObservationVariant.NEUTRALITY:
            return np.array([bmax, bmax, k, HOURS_PER_DAY * k])
        return np.array([bmax, k, HOURS_PER_DAY * k, 1.0])

    def _observe(self, s: EnvState) -> Observation:
        h = min(s.hour, self.n_hours - 1)
        eh = self._eh[s.hour] if s.hour < self.n_hours else 0.0
        wf = self._wf[min(h // HOURS_PER_DAY, len(self._wf) - 1)]
        if self.variant is ObservationVariant.NEUTRALITY:
            vals = (s.buffer_wh, edist(s.buffer_wh, self.reward_spec.b0_wh), eh, wf)
        else:
            vals = (s.buffer_wh, eh, wf, s.prev_duty)
        return Observation(self.variant, vals)

    def reset(self, start_hour: Optional[int] = None,
              initial_fraction: Optional[float] = None) -> Observation:
        if start_hour is None:
            if self.random_start:
                days_needed = -(-self.episode_length // HOURS_PER_DAY)
                n_days = self.n_hours // HOURS_PER_DAY
                last = max(n_days - days_needed, 0)
                start_hour = int(self.rng.integers(0, last + 1)) * HOURS_PER_DAY
            else:
                start_hour = 0
        if initial_fraction is None:
            if self.init_fraction_range is not None:
                lo, hi = self.init_fraction_range
                initial_fraction = float(self.rng.uniform(lo, hi))
            else:
                initial_fraction = self.initial_fraction
        self.state = reset(self.cfg, initial_fraction, self._eh, start_hour)
        return self._observe(self.state)

    def step(self, action_duty: float) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        s = self.state
        new_state, res = step(s, action_duty, self._eh[s.hour], self.reward_spec, self.cfg,
                              discrete=self.discrete)
        self.state = new_state
        done = new_state.elapsed >= self.episode_length or new_state.hour >= self.n_hours
        return StepResult(self._observe(new_state), res.reward, res.consumed_wh, res.harvested_wh,
                          res.failure, done, res.duty, res.buffer_wh)


def simulate(cfg: NodeConfig, harvest: Sequence[float], duties: Sequence[float],
             initial_buffer_wh: float, reward_spec: Optional[RewardSpec] = None) -> dict:
    """Replay a fixed duty schedule; returns per-step arrays.

    Keys: ``buffer`` (post-step), ``consumed``, ``duty``, ``failure``,
    ``reward``.
    """
    if len(duties) > len(harvest):
        raise ValueError("more duties than harvest hours")
    spec = reward_spec or RewardSpec.appgoal()
    s = EnvState(buffer_wh=float(initial_buffer_wh))
    out = {k: [] for k in ("buffer", "consumed", "duty", "failure", "reward")}
    for d, eh in zip(duties, harvest):
        s, r = step(s, float(d), float(eh), spec, cfg)
        out["buffer"].append(r.buffer_wh)
        out["consumed"].append(r.consumed_wh)
        out["duty"].append(r.duty)
        out["failure"].append(r.failure)
        out["reward"].append(r.reward)
    return {k: np.asarray(v) for k, v in out.items()}


@dataclass
class DutyBandit:
    """Stateless environment whose reward is the applied duty.

    No energy is tracked, so no failure is possible and the optimal action
    is ``duty_max``. Used to sanity-check learners.
    """

    cfg: NodeConfig = field(default_factory=NodeConfig)
    episode_length: int = 1
    discrete: bool = False
    rng: Optional[np.random.Generator] = None
    variant: ObservationVariant = ObservationVariant.APPGOAL

    def __post_init__(self):
        self._t = 0
        self._obs = Observation(self.variant, (0.0, 0.0, 0.0, 0.0))

    def observation_scale(self) -> np.ndarray:
        return np.ones(4)

    def reset(self, *args, **kw) -> Observation:
        self._t = 0
        return self._obs

    def step(self, action_duty: float) -> StepResult:
        if not math.isfinite(action_duty):
            raise InvalidActionError(f"non-finite action {action_duty!r}")
        if self.discrete:
            if action_duty not in DISCRETE_DUTIES:
                raise InvalidActionError(f"{action_duty!r} is not in {DISCRETE_DUTIES}")
            duty = float(action_duty)
        else:
            duty = clip_duty(float(action_duty), self.cfg)
        self._t += 1
        return StepResult(self._obs, duty, 0.0, 0.0, False, self._t >= self.episode_length,
                          duty, 0.0)
