"""Offline optimal duty schedule by linear programming.

The schedule knows the whole harvest trace in advance, so it is an upper
bound for any causal controller. Variables per hour ``t = 0..T-1``: duty
``D_t``, the next buffer level ``B_{t+1}`` and spilled energy ``S_t``::

    B_{t+1} = B_t + Eh_t - kappa D_t - S_t      S_t >= 0
    kappa D_t <= B_t - eps_B                     (the load is served from the buffer)
    eps_B <= B_{t+1} <= B_max,   D_min <= D_t <= D_max,   B_T >= b_terminal_min

Spilling models the ``min(., B_max)`` cap; throwing energy away never helps
the duty objective, so the relaxation loses nothing.

Two objectives are available: ``"max_duty"`` maximises ``sum D_t`` and then,
among optimal schedules, minimises ``sum |D_t - D_{t-1}|``;
``"neutrality"`` minimises ``sum |B_t - b0|`` over the day-end levels
(every ``window``-th hour and the last one), with a small tie-breaking
cost on the in-day levels. Spilling costs more per Wh than any distance
it could save, so the schedule only spills when the buffer cannot absorb
the harvest and the replay in the simulator matches the LP trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from ehnode.env import HOURS_PER_DAY, NodeConfig, simulate

EPS_B = 1e-6
SPILL_COST = 10.0  # per Wh, neutrality objective only
# spill tie-breaker for max_duty: among optimal schedules, spill only at the cap
SPILL_TIE = 1e-6
# tie-breaker that keeps in-day levels near the target too
HOURLY_WEIGHT = 1e-3
_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class LpInfeasible(RuntimeError):
    pass


class LpUnbounded(RuntimeError):
    pass


@dataclass
class LpProblem:
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    bounds: np.ndarray
    T: int
    harvest: np.ndarray
    cfg: NodeConfig
    b_start: float
    b_terminal_min: float
    objective: str = "max_duty"
    b0: Optional[float] = None
    smooth: bool = True

    # variable layout: [D (T), B (T), S (T), extra]
    def d_slice(self):
        return slice(0, self.T)

    def b_slice(self):
        return slice(self.T, 2 * self.T)


@dataclass
class LpSchedule:
    duties: np.ndarray
    buffer: np.ndarray
    objective: float
    lp_buffer: np.ndarray
    kappa: float = 5.0

    @property
    def consumed(self) -> np.ndarray:
        return self.duties * self.kappa


def build_lp(harvest, cfg: NodeConfig, b_start: float, b_terminal_min: Optional[float] = None,
             objective: str = "max_duty", b0: Optional[float] = None,
             smooth: bool = True, window: int = HOURS_PER_DAY) -> LpProblem:
    eh = np.asarray(harvest, dtype=np.float64)
    T = len(eh)
    if T < 1:
        raise ValueError("horizon must be >= 1")
    if b_terminal_min is None:
        b_terminal_min = b_start
    if objective not in ("max_duty", "neutrality"):
        raise ValueError(f"unknown objective {objective!r}")
    k = cfg.consume_coeff_wh
    nv = 3 * T + (T if objective == "neutrality" else 0)
    D = np.arange(T)
    B = T + np.arange(T)       # B[t] is B_{t+1}
    S = 2 * T + np.arange(T)
    t = np.arange(T)

    # B_{t+1} - B_t + k D_t + S_t = Eh_t
    rows = np.concatenate([t, t, t, t[1:]])
    cols = np.concatenate([B, D, S, B[:-1]])
    vals = np.concatenate([np.ones(T), np.full(T, k), np.ones(T), -np.ones(T - 1)])
    A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(T, nv))
    b_eq = eh.copy()
    b_eq[0] += b_start

    # k D_t - B_t <= -eps  (B_0 is a constant)
    rows = np.concatenate([t, t[1:]])
    cols = np.concatenate([D, B[:-1]])
    vals = np.concatenate([np.full(T, k), -np.ones(T - 1)])
    b_ub = np.full(T, -EPS_B)
    b_ub[0] = b_start - EPS_B
    ub_parts = [sp.csr_matrix((vals, (rows, cols)), shape=(T, nv))]
    ub_rhs = [b_ub]

    bounds = np.empty((nv, 2))
    bounds[D] = (cfg.duty_min, cfg.duty_max)
    bounds[B] = (EPS_B, cfg.buffer_capacity_wh)
    bounds[B[-1], 0] = max(EPS_B, b_terminal_min)
    bounds[S] = (0.0, np.inf)
    c = np.zeros(nv)
    if objective == "max_duty":
        c[D] = -1.0
        c[S] = SPILL_TIE
    else:
        target = b0 if b0 is not None else b_start
        A = 3 * T + np.arange(T)
        bounds[A] = (0.0, np.inf)
        # A_t >= |B_{t+1} - target|, weighted only at the end of each day
        pos = sp.csr_matrix((np.concatenate([np.ones(T), -np.ones(T)]),
                             (np.concatenate([t, t]), np.concatenate([B, A]))), shape=(T, nv))
        neg = sp.csr_matrix((np.concatenate([-np.ones(T), -np.ones(T)]),
                             (np.concatenate([t, t]), np.concatenate([B, A]))), shape=(T, nv))
        ub_parts += [pos, neg]
        ub_rhs += [np.full(T, target), np.full(T, -target)]
        ends = t % window == window - 1
        ends[-1] = True
        c[A] = np.where(ends, 1.0, HOURLY_WEIGHT)
        c[S] = SPILL_COST
        b0 = target
    return LpProblem(c, A_eq, b_eq, sp.vstack(ub_parts).tocsr(), np.concatenate(ub_rhs), bounds,
                     T, eh, cfg, float(b_start), float(b_terminal_min), objective, b0, smooth)


def _run(c, A_ub, b_ub, A_eq, b_eq, bounds):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs", options=_HIGHS)
    if res.status == 2:
        raise LpInfeasible(res.message)
    if res.status == 3:
        raise LpUnbounded(res.message)
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    return res


def solve_lp(lp: LpProblem) -> LpSchedule:
    """Solve and replay the duties through the simulator.

    ``buffer`` is the simulated trajectory (post-step levels); it is at
    least the LP's own ``lp_buffer`` everywhere because the LP may spill
    more than the simulator does.
    """
    res = _run(lp.c, lp.A_ub, lp.b_ub, lp.A_eq, lp.b_eq, lp.bounds)
    x = res.x
    T = lp.T
    if lp.objective == "max_duty" and lp.smooth and T > 1:
        x = _smooth_stage(lp, float(np.sum(x[:T])))
    duties = np.clip(x[:T], lp.cfg.duty_min, lp.cfg.duty_max)
    sim = simulate(lp.cfg, lp.harvest, duties, lp.b_start)
    return LpSchedule(duties, sim["buffer"], float(np.sum(duties)), x[T:2 * T].copy(),
                      lp.cfg.consume_coeff_wh)


def _smooth_stage(lp: LpProblem, best: float) -> np.ndarray:
    """Among schedules with sum D >= best, minimise total duty variation."""
    T = lp.T
    nv0 = lp.A_eq.shape[1]
    nv = nv0 + (T - 1)
    V = nv0 + np.arange(T - 1)
    t = np.arange(T - 1)
    pad = lambda m: sp.hstack([m, sp.csr_matrix((m.shape[0], T - 1))]).tocsr()
    # V_t >= +-(D_{t+1} - D_t)
    up = sp.csr_matrix((np.concatenate([np.ones(T - 1), -np.ones(T - 1), -np.ones(T - 1)]),
                        (np.concatenate([t, t, t]), np.concatenate([t + 1, t, V]))), shape=(T - 1, nv))
    dn = sp.csr_matrix((np.concatenate([-np.ones(T - 1), np.ones(T - 1), -np.ones(T - 1)]),
                        (np.concatenate([t, t, t]), np.concatenate([t + 1, t, V]))), shape=(T - 1, nv))
    total = sp.csr_matrix((-np.ones(T), (np.zeros(T, dtype=int), np.arange(T))), shape=(1, nv))
    A_ub = sp.vstack([pad(lp.A_ub), up, dn, total]).tocsr()
    b_ub = np.concatenate([lp.b_ub, np.zeros(2 * (T - 1)), [-(best - 1e-9 * max(1.0, best))]])
    bounds = np.vstack([lp.bounds, np.tile([0.0, np.inf], (T - 1, 1))])
    c = np.zeros(nv)
    c[V] = 1.0
    c[2 * T:3 * T] = SPILL_TIE
    return _run(c, A_ub, b_ub, pad(lp.A_eq), lp.b_eq, bounds).x[:nv0]


def optimal_schedule(harvest, cfg: NodeConfig, b_start: float, **kw) -> LpSchedule:
    return solve_lp(build_lp(harvest, cfg, b_start, **kw))


def write_schedule_csv(sched: LpSchedule, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "duty", "buffer"])
        for h, (d, b) in enumerate(zip(sched.duties, sched.buffer)):
            w.writerow([h, repr(float(d)), repr(float(b))])
