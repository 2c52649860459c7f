"""Reward functions for duty-cycle control.

Two designs are provided:

* ``NEUTRALITY`` rewards staying close to a target buffer level ``b0``
  through a piecewise function of the distance ``|B - b0|``.
* ``APPGOAL`` rewards the duty cycle itself, penalises the squared change
  of duty between consecutive steps and punishes power failures.

Both can be assigned every step (``episodic_T == 1``) or once at the end
of a block of ``episodic_T`` steps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional

# Distances at or below this count as "exactly zero" for reward_e.
EDIST_ZERO_TOL = 1e-9


class RewardKind(str, enum.Enum):
    NEUTRALITY = "neutrality"
    APPGOAL = "appgoal"


@dataclass(frozen=True)
class RewardSpec:
    """Which reward to compute and with what parameters.

    ``duty_units`` and ``variance_units`` rescale the duty term and the duty
    change inside the APPGOAL reward (1 = fractions, 100 = percent). Both
    default to 1, which is the plain ``D - zeta * Var**2`` form.
    """

    kind: RewardKind = RewardKind.APPGOAL
    b0_wh: float = 24.0
    zeta: float = 0.05
    failure_penalty: float = 5.0
    episodic_T: int = 1
    duty_units: float = 1.0
    variance_units: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RewardKind(self.kind))
        if self.zeta < 0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")
        if self.failure_penalty < 0:
            raise ValueError(f"failure_penalty must be >= 0, got {self.failure_penalty}")
        if int(self.episodic_T) != self.episodic_T or self.episodic_T < 1:
            raise ValueError(f"episodic_T must be an integer >= 1, got {self.episodic_T}")
        if self.b0_wh < 0:
            raise ValueError(f"b0_wh must be >= 0, got {self.b0_wh}")
        for name in ("duty_units", "variance_units"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")

    @classmethod
    def neutrality(cls, b0_wh: float = 24.0, episodic_T: int = 1) -> "RewardSpec":
        return cls(kind=RewardKind.NEUTRALITY, b0_wh=b0_wh, episodic_T=episodic_T)

    @classmethod
    def appgoal(cls, zeta: float = 0.05, failure_penalty: float = 5.0,
                episodic_T: int = 1, duty_units: float = 1.0,
                variance_units: float = 1.0) -> "RewardSpec":
        return cls(kind=RewardKind.APPGOAL, zeta=zeta, failure_penalty=failure_penalty,
                   episodic_T=episodic_T, duty_units=duty_units, variance_units=variance_units)

    def with_(self, **changes) -> "RewardSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "b0_wh": self.b0_wh,
            "zeta": self.zeta,
            "failure_penalty": self.failure_penalty,
            "episodic_T": self.episodic_T,
            "duty_units": self.duty_units,
            "variance_units": self.variance_units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardSpec":
        return cls(**d)


def edist(buffer_wh: float, b0_wh: float) -> float:
    """Distance from energy neutrality, ``|B - b0|``."""
    return abs(buffer_wh - b0_wh)


def reward_e(edist_wh: float) -> float:
    """Piecewise energy-neutrality reward.

    ====================  ==================
    distance (Wh)         reward
    ====================  ==================
    0                     500
    (0, 1]                500 - d / 10
    (1, 5]                10 - d / 100
    > 5                   -500
    ====================  ==================

    The function is discontinuous at 1 Wh and 5 Wh; no smoothing is applied.
    """
    if edist_wh < 0:
        raise ValueError(f"edist must be >= 0, got {edist_wh}")
    if edist_wh <= EDIST_ZERO_TOL:
        return 500.0
    if edist_wh <= 1.0:
        return 500.0 - edist_wh / 10.0
    if edist_wh <= 5.0:
        return 10.0 - edist_wh / 100.0
    return -500.0


def duty_variance(duty: float, prev_duty: float) -> float:
    """Absolute change of duty cycle relative to the previous step."""
    return abs(duty - prev_duty)


def reward_a(duty: float, var: float, buffer_after_wh: float, spec: RewardSpec,
             failed: Optional[bool] = None) -> float:
    """Per-step application-goal reward.

    Returns ``u_d * duty - zeta * (u_v * var)**2``, with the unit factors
    taken from ``spec``, while the node is alive and ``-failure_penalty`` on a failure step.
    A failure is ``buffer_after_wh == 0`` unless ``failed`` is given
    explicitly, which lets the simulator apply a stricter failure rule.
    """
    if failed is None:
        failed = buffer_after_wh <= 0.0
    if failed:
        return -spec.failure_penalty
    return spec.duty_units * duty - spec.zeta * (spec.variance_units * var) ** 2


def reward_a_episodic(step_rewards: Iterable[float]) -> float:
    """Sum of per-step terms over one episode; equals reward_a when T = 1."""
    terms = list(step_rewards)
    if not terms:
        raise ValueError("reward_a_episodic needs at least one step reward")
    return math.fsum(terms) if len(terms) > 1 else float(terms[0])
