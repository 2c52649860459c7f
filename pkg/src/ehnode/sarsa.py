"""Tabular SARSA(lambda) over discretised observations and five duty levels."""

from __future__ import annotations

import bisect
import json
import math
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ehnode.env import DISCRETE_DUTIES, HOURS_PER_DAY, NodeConfig

log = logging.getLogger(__name__)

N_ACTIONS = len(DISCRETE_DUTIES)


@dataclass(frozen=True)
class Discretizer:
    """Per-dimension bin edges.

    ``edges[k]`` lists the ``n_k + 1`` boundaries of dimension ``k``. Bin
    ``i`` is the half-open interval ``[edges[i], edges[i + 1])``, so a value
    sitting on an interior edge goes to the bin that edge opens. Values
    outside the outer edges are clamped into the first or last bin.
    """

    edges: tuple

    def __post_init__(self):
        edges = tuple(tuple(float(x) for x in e) for e in self.edges)
        for e in edges:
            if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
                raise ValueError(f"bin edges must be strictly increasing, got {e}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_inner", [list(e[1:-1]) for e in edges])
        object.__setattr__(self, "_counts", [len(e) - 1 for e in edges])

    @property
    def shape(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def uniform(cls, ranges: Sequence[tuple], counts: Sequence[int]) -> "Discretizer":
        return cls(tuple(tuple(np.linspace(lo, hi, n + 1)) for (lo, hi), n in zip(ranges, counts)))

    @classmethod
    def for_neutrality(cls, cfg: NodeConfig, counts=(10, 10, 8, 8)) -> "Discretizer":
        """Bins for (B, Edist, Eh, Wf_day)."""
        k, bmax = cfg.consume_coeff_wh, cfg.buffer_capacity_wh
        return cls.uniform([(0, bmax), (0, bmax / 2), (0, k), (0, HOURS_PER_DAY * k)], counts)

    @classmethod
    def for_appgoal(cls, cfg: NodeConfig, counts=(10, 8, 8, 6)) -> "Discretizer":
        """Bins for (B, Eh, Wf, D_prev); six duty bins separate 0 and the five levels."""
        k, bmax = cfg.consume_coeff_wh, cfg.buffer_capacity_wh
        return cls.uniform([(0, bmax), (0, k), (0, HOURS_PER_DAY * k), (-0.1, 1.1)], counts)

    def bin_of(self, dim: int, x: float) -> int:
        return bisect.bisect_right(self._inner[dim], x)

    def discretize(self, obs) -> int:
        vals = obs.values if hasattr(obs, "values") else obs
        idx = 0
        for inner, n, x in zip(self._inner, self._counts, vals):
            if not math.isfinite(x):
                raise ValueError(f"non-finite observation component {x!r}")
            idx = idx * n + bisect.bisect_right(inner, x)
        return idx

    def to_dict(self) -> dict:
        return {"edges": [list(e) for e in self.edges]}


def discretize(obs, disc: Discretizer) -> int:
    return disc.discretize(obs)


@dataclass
class QTable:
    q: np.ndarray
    visits: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, n_actions: int = N_ACTIONS) -> "QTable":
        return cls(np.zeros((n_states, n_actions)), np.zeros((n_states, n_actions), dtype=np.int64))

    def greedy(self, s: int) -> int:
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return int(np.argmax(self.q[s]))


@dataclass(frozen=True)
class SarsaHyper:
    alpha: float = 0.1
    gamma: float = 0.99
    lam: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    decay_fraction: float = 0.5
    episodes: int = 3000
    replacing_traces: bool = True
    bootstrap_truncated: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        for name in ("gamma", "lam", "epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")

    def epsilon(self, episode: int) -> float:
        """Linear decay over the first ``decay_fraction`` of episodes."""
        horizon = max(1.0, self.decay_fraction * self.episodes)
        frac = min(1.0, episode / horizon)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        return asdict(self)


def select_action(s: int, qtable: QTable, epsilon: float, rng: np.random.Generator) -> int:
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(qtable.q.shape[1]))
    return qtable.greedy(s)


def sarsa_update(s: int, a: int, r: float, s2: int, a2: int, qtable: QTable, traces: np.ndarray,
                 hyper: SarsaHyper, terminal: bool = False) -> float:
    """One SARSA(lambda) step, in place. Returns the TD error.

    ``delta = r + gamma Q(s', a') - Q(s, a)`` (no bootstrap when
    ``terminal``); the trace of ``(s, a)`` is set to 1 (replacing) or
    incremented (accumulating), every entry moves by ``alpha delta e`` and
    all traces then decay by ``gamma lambda``.
    """
    q = qtable.q
    target = r if terminal else r + hyper.gamma * q[s2, a2]
    delta = target - q[s, a]
    if hyper.replacing_traces:
        traces[s, a] = 1.0
    else:
        traces[s, a] += 1.0
    qtable.visits[s, a] += 1
    if delta != 0.0:
        q += hyper.alpha * delta * traces
    traces *= hyper.gamma * hyper.lam
    return float(delta)


class _SparseTraces:
    """Trace matrix that only touches the entries that are non-zero.

    Behaves like the dense update in :func:`sarsa_update` but scales with
    the number of live traces instead of the table size. Traces below
    ``cutoff`` are dropped.
    """

    def __init__(self, cutoff: float = 1e-6):
        self.cutoff = cutoff
        self.clear()

    def clear(self):
        self.s = np.empty(0, dtype=np.intp)
        self.a = np.empty(0, dtype=np.intp)
        self.v = np.empty(0)

    def update(self, s, a, r, s2, a2, qtable: QTable, hyper: SarsaHyper, terminal: bool):
        q = qtable.q
        target = r if terminal else r + hyper.gamma * q[s2, a2]
        delta = float(target - q[s, a])
        hit = np.flatnonzero((self.s == s) & (self.a == a))
        if hit.size:
            k = hit[0]
            self.v[k] = 1.0 if hyper.replacing_traces else self.v[k] + 1.0
        else:
            self.s = np.append(self.s, s)
            self.a = np.append(self.a, a)
            self.v = np.append(self.v, 1.0)
        qtable.visits[s, a] += 1
        if delta != 0.0:
            # (s, a) pairs are unique, so fancy-index addition is exact
            q[self.s, self.a] += hyper.alpha * delta * self.v
        self.v *= hyper.gamma * hyper.lam
        keep = self.v >= self.cutoff
        if not keep.all():
            self.s, self.a, self.v = self.s[keep], self.a[keep], self.v[keep]
        return delta


@dataclass
class SarsaResult:
    qtable: QTable
    discretizer: Discretizer
    curve: list = field(default_factory=list)

    def act(self, obs) -> float:
        return DISCRETE_DUTIES[self.qtable.greedy(self.discretizer.discretize(obs))]


def train_sarsa(env_factory: Callable, reward_spec, hyper: SarsaHyper, seed: int,
                discretizer: Optional[Discretizer] = None) -> SarsaResult:
    """Train a Q-table for ``hyper.episodes`` episodes.

    ``env_factory(reward_spec, rng)`` must return a discrete-mode env.
    Episodic rewards arrive on the last step of an episode, which is where
    the update credits them. The curve holds the undiscounted return of
    each episode.
    """
    ss = np.random.SeedSequence(seed)
    env_ss, act_ss = ss.spawn(2)
    env = env_factory(reward_spec, np.random.default_rng(env_ss))
    rng = np.random.default_rng(act_ss)
    disc = discretizer
    if disc is None:
        from ehnode.env import ObservationVariant
        disc = (Discretizer.for_neutrality(env.cfg) if env.variant is ObservationVariant.NEUTRALITY
                else Discretizer.for_appgoal(env.cfg))
    qt = QTable.zeros(disc.n_states)
    traces = _SparseTraces()
    curve = []
    for ep in range(hyper.episodes):
        eps = hyper.epsilon(ep)
        traces.clear()
        s = disc.discretize(env.reset())
        a = select_action(s, qt, eps, rng)
        total = 0.0
        while True:
            res = env.step(DISCRETE_DUTIES[a])
            total += res.reward
            s2 = disc.discretize(res.next_observation)
            a2 = select_action(s2, qt, eps, rng)
            terminal = res.episode_done and not hyper.bootstrap_truncated
            traces.update(s, a, res.reward, s2, a2, qt, hyper, terminal)
            if res.episode_done:
                break
            s, a = s2, a2
        curve.append(total)
    return SarsaResult(qt, disc, curve)


# Q-table snapshot: a JSON document
#   {"format": "ehnode-qtable-1", "edges": [[...], ...], "duties": [...],
#    "q": [[...], ...], "visits": [[...], ...]}
# Python's float repr round-trips exactly through JSON.


def save_qtable(result: SarsaResult, path: Union[str, Path]) -> None:
    doc = {
        "format": "ehnode-qtable-1",
        "edges": [list(e) for e in result.discretizer.edges],
        "duties": list(DISCRETE_DUTIES),
        "q": result.qtable.q.tolist(),
        "visits": result.qtable.visits.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_qtable(path: Union[str, Path]) -> SarsaResult:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "ehnode-qtable-1":
        raise ValueError(f"{path}: not a Q-table snapshot")
    disc = Discretizer(tuple(tuple(e) for e in doc["edges"]))
    qt = QTable(np.array(doc["q"], dtype=np.float64), np.array(doc["visits"], dtype=np.int64))
    if qt.q.shape != (disc.n_states, N_ACTIONS):
        raise ValueError(f"{path}: table shape {qt.q.shape} does not match the bins")
    return SarsaResult(qt, disc)
